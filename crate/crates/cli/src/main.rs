fn main() {
    let code = prelabel_cli::dispatch(
        std::env::args_os(),
        |k| std::env::var(k).ok(),
        &mut std::io::stdout().lock(),
        &mut std::io::stderr().lock(),
    );
    std::process::exit(code);
}
