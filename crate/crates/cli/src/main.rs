fn main() {
    std::process::exit(sc_arena_cli::main_with(std::env::args_os()));
}
