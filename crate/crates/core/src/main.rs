use std::io::Write;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format(|buf, rec| {
            writeln!(
                buf,
                "level={} {}",
                rec.level().as_str().to_lowercase(),
                rec.args()
            )
        })
        .init();
    std::process::exit(nptad::cli::run_cli(std::env::args_os()));
}
