fn main() {
    std::process::exit(aoi_outage::cli::main_with_args(std::env::args_os()));
}
