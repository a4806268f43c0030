fn main() {
    std::process::exit(provico::cli::main_entry(std::env::args_os()));
}
