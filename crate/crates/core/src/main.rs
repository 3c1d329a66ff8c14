fn main() {
    std::process::exit(fwi_lab::cli::run(std::env::args_os()));
}
