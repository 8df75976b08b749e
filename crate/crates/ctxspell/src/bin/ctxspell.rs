fn main() {
    std::process::exit(ctxspell::cli::run());
}
