fn main() {
    std::process::exit(rabc_seg::cli::main_with(std::env::args_os()));
}
