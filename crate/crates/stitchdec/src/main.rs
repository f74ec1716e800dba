fn main() {
    std::process::exit(stitchdec::cli::main());
}
