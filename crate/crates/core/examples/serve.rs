//! Starts the colorization service with a fresh tiny generator, drives one
//! session through it over HTTP and shuts down. Pass `--forever` to keep it
//! running for the studio UI.
//!
//! ```text
//! cargo run --release --example serve -- [--forever] [addr]
//! ```

use std::net::SocketAddr;

use candle_core::{DType, Device};
use manga_colorize::colorspace::to_grayscale;
use manga_colorize::data::{save_hints, synthetic_page, Hint, HintSet};
use manga_colorize::generator::{Generator, GeneratorConfig};
use manga_colorize::pipeline::Priors;
use manga_colorize::raster;
use manga_colorize::service::{self, AppState, ServiceConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args: Vec<String> = std::env::args().skip(1).collect();
    let forever = args.iter().any(|a| a == "--forever");
    let addr: SocketAddr = args
        .iter()
        .find(|a| !a.starts_with("--"))
        .map(|a| a.parse())
        .transpose()?
        .unwrap_or_else(|| "127.0.0.1:0".parse().expect("literal address"));

    let model = Generator::new(GeneratorConfig::tiny(), &Device::Cpu, DType::F32, 0)?;
    let app = AppState::new(model, Priors::default(), ServiceConfig::default());
    if forever {
        println!("serving on http://{addr}/api");
        service::run(addr, app)?;
        return Ok(());
    }

    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(addr).await?;
        let base = format!("http://{}/api", listener.local_addr()?);
        tokio::spawn(service::serve(listener, app.clone()));
        let client = reqwest::Client::new();

        let page = raster::encode_plane_png(&to_grayscale(&synthetic_page(128, 128, 4))?)?;
        let created: serde_json::Value =
            serde_json::from_slice(&client.post(format!("{base}/sessions")).body(page).send().await?.bytes().await?)?;
        let id = created["id"].as_str().expect("session id").to_string();
        println!("session {id}");

        let hints = HintSet::new(
            128,
            128,
            vec![Hint {
                x: 64,
                y: 40,
                color: [0.9, 0.6, 0.2],
                radius: 10,
            }],
        )?;
        client.put(format!("{base}/sessions/{id}/hints")).body(save_hints(&hints)).send().await?;
        let r = client
            .post(format!("{base}/sessions/{id}/colorize"))
            .body(r#"{"lambda_ab": 0.8}"#)
            .send()
            .await?;
        println!("colorize -> {}", r.status());
        for lambda in [0.0, 0.5, 1.0] {
            let r = client
                .post(format!("{base}/sessions/{id}/blend"))
                .body(format!(r#"{{"lambda_ab": {lambda}}}"#))
                .send()
                .await?;
            println!("blend {lambda} -> {}", r.status());
        }
        let health = client.get(format!("{base}/health")).send().await?.text().await?;
        println!("health {health}");
        Ok::<_, Box<dyn std::error::Error>>(())
    })?;
    println!("generator forwards: {}", app.forward_count());
    Ok(())
}
