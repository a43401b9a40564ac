fn main() {
    std::process::exit(hambr::cli::main_with_args(std::env::args_os()));
}
