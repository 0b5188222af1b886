fn main() {
    std::process::exit(llm_jepa::cli::run(std::env::args_os()));
}
