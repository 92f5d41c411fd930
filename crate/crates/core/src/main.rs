fn main() {
    std::process::exit(sparsepanel::cli::run(std::env::args_os()));
}
