#[tokio::main(flavor = "current_thread")]
async fn main() {
    let code = gridlet_client::cli::run(
        std::env::args_os(),
        &mut std::io::stdout(),
        &mut std::io::stderr(),
    )
    .await;
    std::process::exit(code);
}
