use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use forge_core::backends::{HttpBackend, HttpConfig, InstructionLlmBackend, TextToImageBackend, VisionLanguageEmbedder};
use forge_core::image::Image;
use forge_core::Error;

struct Request {
    path: String,
    content_type: Option<String>,
    body: Vec<u8>,
}

struct Response {
    status: u16,
    content_type: &'static str,
    body: Vec<u8>,
    delay: Duration,
}

impl Response {
    fn json(v: serde_json::Value) -> Self {
        Response {
            status: 200,
            content_type: "application/json",
            body: v.to_string().into_bytes(),
            delay: Duration::ZERO,
        }
    }

    fn status(code: u16) -> Self {
        Response {
            status: code,
            content_type: "text/plain",
            body: b"nope".to_vec(),
            delay: Duration::ZERO,
        }
    }
}

fn read_request(stream: &mut TcpStream) -> Option<Request> {
    let mut reader = BufReader::new(stream.try_clone().ok()?);
    let mut line = String::new();
    reader.read_line(&mut line).ok()?;
    let path = line.split_whitespace().nth(1)?.to_string();
    let mut len = 0;
    let mut content_type = None;
    loop {
        let mut h = String::new();
        reader.read_line(&mut h).ok()?;
        let h = h.trim_end();
        if h.is_empty() {
            break;
        }
        let (k, v) = h.split_once(':')?;
        match k.to_ascii_lowercase().as_str() {
            "content-length" => len = v.trim().parse().ok()?,
            "content-type" => content_type = Some(v.trim().to_string()),
            _ => {}
        }
    }
    let mut body = vec![0; len];
    reader.read_exact(&mut body).ok()?;
    Some(Request { path, content_type, body })
}

/// Serve requests with `handler` on a background thread; returns the base url
/// and a counter of requests seen.
fn serve<F>(handler: F) -> (String, Arc<AtomicUsize>)
where
    F: Fn(&Request, usize) -> Response + Send + 'static,
{
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let hits = Arc::new(AtomicUsize::new(0));
    let counter = Arc::clone(&hits);
    thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { continue };
            let Some(req) = read_request(&mut stream) else { continue };
            let n = counter.fetch_add(1, Ordering::SeqCst);
            let resp = handler(&req, n);
            thread::sleep(resp.delay);
            let head = format!(
                "HTTP/1.1 {} X\r\nContent-Type: {}\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
                resp.status,
                resp.content_type,
                resp.body.len()
            );
            let _ = stream.write_all(head.as_bytes());
            let _ = stream.write_all(&resp.body);
        }
    });
    (url, hits)
}

fn client(url: &str) -> HttpBackend {
    let mut c = HttpConfig::new(url);
    c.timeout = Duration::from_secs(5);
    c.resolutions = vec![16];
    HttpBackend::new(c)
}

#[test]
fn embeds_text_and_images() {
    let (url, _) = serve(|req, _| match req.path.as_str() {
        "/v1/embed_text" => {
            let v: serde_json::Value = serde_json::from_slice(&req.body).unwrap();
            let n = v["text"].as_str().unwrap().len() as f64;
            Response::json(serde_json::json!({ "vector": [n, 1.0] }))
        }
        "/v1/embed_image" => {
            assert_eq!(req.content_type.as_deref(), Some("image/png"));
            let img = Image::from_png_bytes(&req.body).unwrap();
            Response::json(serde_json::json!({ "vector": [img.width() as f64, img.height() as f64] }))
        }
        _ => Response::status(404),
    });
    let b = client(&url);
    assert_eq!(b.embed_text("cat").unwrap(), vec![3.0, 1.0]);
    assert_eq!(b.embed_image(&Image::filled(4, 6, [0.5; 3])).unwrap(), vec![4.0, 6.0]);
}

#[test]
fn generates_png_images() {
    let (url, _) = serve(|req, _| {
        let v: serde_json::Value = serde_json::from_slice(&req.body).unwrap();
        let side = v["width"].as_u64().unwrap() as u32;
        Response {
            status: 200,
            content_type: "image/png",
            body: Image::filled(side, side, [1.0, 0.0, 0.0]).to_png_bytes().unwrap(),
            delay: Duration::ZERO,
        }
    });
    let img = client(&url).generate("a cat", 16, 3).unwrap();
    assert_eq!((img.width(), img.height()), (16, 16));
    assert_eq!(img.pixel(0, 0), [1.0, 0.0, 0.0]);
}

#[test]
fn server_errors_are_retried() {
    let (url, hits) = serve(|_, n| {
        if n < 2 {
            Response::status(503)
        } else {
            Response::json(serde_json::json!({ "texts": ["a cat and a bus"] }))
        }
    });
    let texts = client(&url).complete("write one", 1).unwrap();
    assert_eq!(texts, vec!["a cat and a bus"]);
    assert_eq!(hits.load(Ordering::SeqCst), 3);
}

#[test]
fn client_errors_are_not_retried() {
    let (url, hits) = serve(|_, _| Response::status(404));
    let err = client(&url).embed_text("cat").unwrap_err();
    assert!(matches!(err, Error::Backend(_)), "{err:?}");
    assert_eq!(hits.load(Ordering::SeqCst), 1);
}

#[test]
fn wrong_completion_count_is_rejected() {
    let (url, _) = serve(|_, _| Response::json(serde_json::json!({ "texts": ["only one"] })));
    assert!(matches!(client(&url).complete("write two", 2), Err(Error::Backend(_))));
}

#[test]
fn unreachable_and_slow_servers() {
    let port = {
        let l = TcpListener::bind("127.0.0.1:0").unwrap();
        l.local_addr().unwrap().port()
    };
    let mut c = HttpConfig::new(format!("http://127.0.0.1:{port}"));
    c.retries = 0;
    let err = HttpBackend::new(c).embed_text("cat").unwrap_err();
    assert!(matches!(err, Error::BackendUnreachable(_)), "{err:?}");

    let (url, _) = serve(|_, _| Response {
        delay: Duration::from_millis(1500),
        ..Response::json(serde_json::json!({ "vector": [1.0] }))
    });
    let mut c = HttpConfig::new(url);
    c.timeout = Duration::from_millis(300);
    c.retries = 0;
    let err = HttpBackend::new(c).embed_text("cat").unwrap_err();
    assert!(matches!(err, Error::BackendTimeout(_)), "{err:?}");
}
