fn main() {
    std::process::exit(fedssf::cli::main_with(std::env::args_os()));
}
