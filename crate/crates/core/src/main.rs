fn main() {
    std::process::exit(l1knode::cli::run(std::env::args_os()));
}
