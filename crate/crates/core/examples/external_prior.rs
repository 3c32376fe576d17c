//! Plugs an HTTP shading model into inference. A loopback server stands in
//! for the external model: it decodes the page from the request and returns
//! it with its contrast boosted.

use std::io::{Read, Write};
use std::net::TcpListener;
use std::sync::Arc;
use std::thread;

use base64::Engine;
use candle_core::{DType, Device};
use manga_colorize::colorspace::{to_grayscale, ImagePlane, ValueRange};
use manga_colorize::data::synthetic_page;
use manga_colorize::generator::{Generator, GeneratorConfig};
use manga_colorize::pipeline::{colorize, InferenceRequest, Priors};
use manga_colorize::priors::{external_prior_adapter, PriorRequest, PriorRole};
use manga_colorize::raster;

fn handle(mut stream: std::net::TcpStream) {
    let mut buf = Vec::new();
    let mut chunk = [0u8; 8192];
    let body_start = loop {
        let n = stream.read(&mut chunk).unwrap();
        buf.extend_from_slice(&chunk[..n]);
        if let Some(i) = buf.windows(4).position(|w| w == b"\r\n\r\n") {
            break i + 4;
        }
    };
    let head = String::from_utf8_lossy(&buf[..body_start]).to_ascii_lowercase();
    let len: usize = head
        .lines()
        .find_map(|l| l.strip_prefix("content-length:"))
        .and_then(|v| v.trim().parse().ok())
        .unwrap_or(0);
    while buf.len() < body_start + len {
        let n = stream.read(&mut chunk).unwrap();
        buf.extend_from_slice(&chunk[..n]);
    }
    let req: PriorRequest = serde_json::from_slice(&buf[body_start..body_start + len]).unwrap();
    let png = base64::engine::general_purpose::STANDARD.decode(req.image).unwrap();
    let page = raster::decode_plane(&png).unwrap();
    let boosted: Vec<f64> = page.data().iter().map(|v| ((v - 0.5) * 1.4 + 0.5).clamp(0.0, 1.0)).collect();
    let out = ImagePlane::new(page.height(), page.width(), ValueRange::Unit, boosted).unwrap();
    let body = raster::encode_plane_png(&out).unwrap();
    let head = format!("HTTP/1.1 200 OK\r\ncontent-type: image/png\r\ncontent-length: {}\r\n\r\n", body.len());
    stream.write_all(head.as_bytes()).unwrap();
    stream.write_all(&body).unwrap();
}

fn main() -> manga_colorize::Result<()> {
    let listener = TcpListener::bind("127.0.0.1:0").expect("bind");
    let url = format!("http://{}/shade", listener.local_addr().expect("addr"));
    thread::spawn(move || {
        for stream in listener.incoming().flatten() {
            handle(stream);
        }
    });

    let priors = Priors {
        shading: Arc::new(external_prior_adapter(&url, PriorRole::Shading)?),
        ..Priors::default()
    };
    let model = Generator::new(GeneratorConfig::tiny(), &Device::Cpu, DType::F32, 0)?;
    let page = to_grayscale(&synthetic_page(96, 96, 6))?;
    let result = colorize(&InferenceRequest::new(page.clone()), &priors, &model)?;
    let spread = |p: &ImagePlane| {
        let (lo, hi) = p.data().iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
        hi - lo
    };
    println!("shading prior at {url}");
    println!("page range {:.3}, x_g range {:.3}", spread(&page), spread(&result.x_g.to_range(ValueRange::Unit)?));
    println!("Y {:?}", result.y.dims());
    Ok(())
}
