fn main() {
    std::process::exit(iclmc::cli::main_with(std::env::args_os()));
}
