fn main() {
    std::process::exit(fscil_seg::cli::main());
}
