fn main() -> std::process::ExitCode {
    let args: Vec<String> = std::env::args().collect();
    emoctx::cli::run(&args)
}
