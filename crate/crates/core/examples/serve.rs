//! Starts the HTTP service with mock providers.
//!
//! ```text
//! SKILLHARNESS_API_TOKEN=secret cargo run --example serve
//! curl -H 'authorization: Bearer secret' -X POST localhost:8080/v1/sessions -d '{"user_id":"demo"}' -H 'content-type: application/json'
//! ```
use skillharness::config::Config;

#[tokio::main]
async fn main() -> skillharness::Result<()> {
    tracing_subscriber::fmt().with_writer(std::io::stderr).init();
    let config = Config::load(None)?;
    skillharness::service::serve(&config).await
}
