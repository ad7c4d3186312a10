mod cli;

fn main() -> std::process::ExitCode {
    // Restore the default SIGPIPE disposition so piping into `head` ends
    // the process quietly instead of panicking on a closed stdout.
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    cli::run()
}
