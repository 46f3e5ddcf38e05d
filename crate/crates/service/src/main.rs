use std::io::{stderr, stdin, stdout};

fn main() {
    let (mut input, mut out, mut err) = (stdin().lock(), stdout(), stderr());
    let code = tlqa_service::cli::run(
        std::env::args_os(),
        &mut tlqa_service::cli::Io {
            input: &mut input,
            out: &mut out,
            err: &mut err,
        },
    );
    std::process::exit(code);
}
