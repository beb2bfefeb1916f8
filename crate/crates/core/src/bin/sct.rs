fn main() {
    std::process::exit(sct_core::cli::main_from(std::env::args_os()));
}
