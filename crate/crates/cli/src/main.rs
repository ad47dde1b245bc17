use std::process::ExitCode;

fn main() -> ExitCode {
    let mut stdout = std::io::stdout().lock();
    let code = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
        pointadapt_cli::main_with(std::env::args_os(), &mut stdout)
    }))
    .unwrap_or(4);
    ExitCode::from(code)
}
