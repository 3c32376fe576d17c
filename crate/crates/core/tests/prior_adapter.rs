//! The HTTP prior adapter against loopback servers that misbehave in
//! specific ways.

use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::thread;
use std::time::Duration;

use base64::Engine;
use manga_colorize::colorspace::{to_grayscale, ImagePlane, ImageStack};
use manga_colorize::data::{synthetic_page, Hint, HintSet};
use manga_colorize::priors::{
    run_shading, HttpPrior, PriorError, PriorRequest, PriorRole, RoughColorPrior, ShadingPrior,
};
use manga_colorize::{raster, Error};

fn read_request(stream: &mut TcpStream) -> Vec<u8> {
    let mut buf = Vec::new();
    let mut chunk = [0u8; 4096];
    let header_end = loop {
        let n = stream.read(&mut chunk).unwrap();
        assert!(n > 0, "client closed early");
        buf.extend_from_slice(&chunk[..n]);
        if let Some(i) = buf.windows(4).position(|w| w == b"\r\n\r\n") {
            break i + 4;
        }
    };
    let head = String::from_utf8_lossy(&buf[..header_end]).to_ascii_lowercase();
    let len: usize = head
        .lines()
        .find_map(|l| l.strip_prefix("content-length:"))
        .map(|v| v.trim().parse().unwrap())
        .unwrap_or(0);
    while buf.len() < header_end + len {
        let n = stream.read(&mut chunk).unwrap();
        buf.extend_from_slice(&chunk[..n]);
    }
    buf[header_end..header_end + len].to_vec()
}

fn respond(stream: &mut TcpStream, status: &str, body: &[u8]) {
    let head = format!(
        "HTTP/1.1 {status}\r\ncontent-type: image/png\r\ncontent-length: {}\r\nconnection: close\r\n\r\n",
        body.len()
    );
    stream.write_all(head.as_bytes()).unwrap();
    stream.write_all(body).unwrap();
}

/// Serves one connection with `handler` and returns the endpoint URL.
fn serve_once(handler: impl FnOnce(TcpStream) + Send + 'static) -> String {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    thread::spawn(move || {
        let (stream, _) = listener.accept().unwrap();
        handler(stream);
    });
    format!("http://{addr}/prior")
}

fn decode_request(body: &[u8]) -> PriorRequest {
    serde_json::from_slice(body).unwrap()
}

fn page(h: usize, w: usize) -> ImagePlane {
    to_grayscale(&synthetic_page(h, w, 4)).unwrap()
}

fn adapter(url: &str, role: PriorRole) -> HttpPrior {
    HttpPrior::new(url, role, Duration::from_millis(1500)).unwrap()
}

#[test]
fn echo_shading_round_trips_the_page() {
    let url = serve_once(|mut s| {
        let req = decode_request(&read_request(&mut s));
        assert_eq!(req.role, PriorRole::Shading);
        assert!(req.hints.is_none() && req.reference.is_none());
        let png = base64::engine::general_purpose::STANDARD.decode(req.image).unwrap();
        respond(&mut s, "200 OK", &png);
    });
    let p = page(40, 56);
    let out = adapter(&url, PriorRole::Shading).shade(&p).unwrap();
    assert_eq!(out.dims(), (40, 56));
    let err = out
        .data()
        .iter()
        .zip(p.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(err <= 1.0 / 255.0, "{err}");
}

#[test]
fn rough_color_request_carries_hints_and_reference() {
    let url = serve_once(|mut s| {
        let req = decode_request(&read_request(&mut s));
        assert_eq!(req.role, PriorRole::RoughColor);
        let hints = HintSet::from_document(req.hints.expect("hints")).unwrap();
        assert_eq!(hints.hints().len(), 1);
        assert!(req.reference.is_some());
        let out = ImageStack::solid(32, 48, [0.2, 0.5, 0.9]).unwrap();
        respond(&mut s, "200 OK", &raster::encode_stack_png(&out).unwrap());
    });
    let hints = HintSet::new(
        48,
        32,
        vec![Hint {
            x: 3,
            y: 4,
            color: [1.0, 0.0, 0.0],
            radius: 2,
        }],
    )
    .unwrap();
    let reference = synthetic_page(16, 16, 9);
    let out = adapter(&url, PriorRole::RoughColor)
        .colorize(&page(32, 48), Some(&hints), Some(&reference))
        .unwrap();
    assert_eq!(out.dims(), (32, 48));
    let px = out.pixel(10, 10);
    assert!((px[2] - 0.9).abs() < 1.0 / 255.0, "{px:?}");
}

#[test]
fn wrong_dimensions_are_rejected() {
    let url = serve_once(|mut s| {
        read_request(&mut s);
        let out = ImagePlane::filled(16, 16, manga_colorize::colorspace::ValueRange::Unit, 0.5).unwrap();
        respond(&mut s, "200 OK", &raster::encode_plane_png(&out).unwrap());
    });
    let prior = adapter(&url, PriorRole::Shading);
    match prior.shade(&page(24, 32)) {
        Err(PriorError::DimensionMismatch { expected, got }) => {
            assert_eq!(expected, (24, 32));
            assert_eq!(got, (16, 16));
        }
        other => panic!("expected a dimension mismatch, got {other:?}"),
    }
}

#[test]
fn pipeline_wrapper_names_the_stage() {
    let url = serve_once(|mut s| {
        read_request(&mut s);
        let out = ImagePlane::filled(8, 8, manga_colorize::colorspace::ValueRange::Unit, 0.5).unwrap();
        respond(&mut s, "200 OK", &raster::encode_plane_png(&out).unwrap());
    });
    let err = run_shading(&adapter(&url, PriorRole::Shading), &page(24, 32)).unwrap_err();
    assert!(matches!(err, Error::Prior { stage: "shading", .. }), "{err}");
}

#[test]
fn dropped_connection_is_a_transport_error() {
    let url = serve_once(|mut s| {
        read_request(&mut s);
        drop(s);
    });
    let err = adapter(&url, PriorRole::Shading).shade(&page(16, 16)).unwrap_err();
    assert!(matches!(err, PriorError::Transport(_)), "{err:?}");
}

#[test]
fn slow_server_times_out() {
    let url = serve_once(|mut s| {
        read_request(&mut s);
        thread::sleep(Duration::from_secs(4));
    });
    let prior = HttpPrior::new(&url, PriorRole::Shading, Duration::from_millis(300)).unwrap();
    let err = prior.shade(&page(16, 16)).unwrap_err();
    assert!(matches!(err, PriorError::Timeout(_)), "{err:?}");
}

#[test]
fn closed_port_is_unreachable() {
    let port = {
        let l = TcpListener::bind("127.0.0.1:0").unwrap();
        l.local_addr().unwrap().port()
    };
    let url = format!("http://127.0.0.1:{port}/prior");
    let err = adapter(&url, PriorRole::RoughColor)
        .colorize(&page(16, 16), None, None)
        .unwrap_err();
    assert!(matches!(err, PriorError::Unreachable(_)), "{err:?}");
}

#[test]
fn non_image_body_is_malformed() {
    let url = serve_once(|mut s| {
        read_request(&mut s);
        respond(&mut s, "200 OK", b"{\"not\": \"an image\"}");
    });
    let err = adapter(&url, PriorRole::Shading).shade(&page(16, 16)).unwrap_err();
    assert!(matches!(err, PriorError::MalformedResponse(_)), "{err:?}");
}

#[test]
fn error_status_is_malformed() {
    let url = serve_once(|mut s| {
        read_request(&mut s);
        respond(&mut s, "500 Internal Server Error", b"boom");
    });
    let err = adapter(&url, PriorRole::Shading).shade(&page(16, 16)).unwrap_err();
    assert!(matches!(err, PriorError::MalformedResponse(_)), "{err:?}");
}

#[test]
fn non_http_endpoint_is_a_config_error() {
    assert!(matches!(
        HttpPrior::new("ftp://example.invalid", PriorRole::Shading, Duration::from_secs(1)),
        Err(Error::Config(_))
    ));
}
