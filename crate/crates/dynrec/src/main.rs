fn main() {
    std::process::exit(dynrec::cli::main_entry());
}
