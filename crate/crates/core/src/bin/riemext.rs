fn main() {
    riemext::cli::main();
}
