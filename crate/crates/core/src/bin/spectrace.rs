fn main() {
    std::process::exit(spectrace::cli::main_with(std::env::args_os()));
}
