use std::process::ExitCode;

fn main() -> ExitCode {
    // Rust ignores SIGPIPE, turning `hypertvr inspect | head` into a panic
    // on the first write after the reader exits. Restore the Unix default.
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    let args: Vec<String> = std::env::args().collect();
    ExitCode::from(hypertvr::evalcli::cli_dispatch(&args) as u8)
}
