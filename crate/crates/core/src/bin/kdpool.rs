fn main() {
    std::process::exit(kdpool::cli::main_with_args(std::env::args_os()));
}
