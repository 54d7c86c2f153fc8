fn main() {
    std::process::exit(jumpfield::cli::main_entry());
}
