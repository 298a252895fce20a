fn main() {
    std::process::exit(bai_core::cli::exec(std::env::args_os()));
}
