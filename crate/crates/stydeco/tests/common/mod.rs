#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use stydeco::core::config::ExperimentConfig;
use stydeco::core::generator::GeneratorConfig;
use stydeco::core::text::TextEncoderConfig;
use stydeco::fixtures::write_source_corpus;

/// A very small architecture for fast pipeline tests.
pub fn tiny_config() -> ExperimentConfig {
    ExperimentConfig {
        image_size: 16,
        train_steps: 4,
        lr: 1e-3,
        checkpoint_every: 2,
        validation_images: 2,
        text_encoder: TextEncoderConfig {
            max_tokens: 48,
            d_model: 16,
            heads: 2,
            layers: 1,
            ffn_mult: 2,
        },
        generator: GeneratorConfig {
            vae_channels: vec![4, 6, 8],
            latent_channels: 4,
            unet_channels: 8,
            unet_heads: 2,
            ffn_mult: 2,
            d_cond: 16,
            timestep_dim: 8,
            skip_connections: true,
        },
        ..Default::default()
    }
}

pub fn corpus(dir: &Path, n: usize) {
    write_source_corpus(dir, n, 24).unwrap();
}

/// One parsed HTTP request.
pub struct Request {
    pub body: Vec<u8>,
}

/// Serves `handler` on a loopback port until the process exits. Returns
/// the URL and a counter of requests served.
pub fn serve(handler: impl Fn(&Request, usize) -> (u16, Vec<u8>) + Send + Sync + 'static) -> (String, Arc<AtomicUsize>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/stylize", listener.local_addr().unwrap());
    let count = Arc::new(AtomicUsize::new(0));
    let counter = count.clone();
    let handler = Arc::new(handler);
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { continue };
            let counter = counter.clone();
            let handler = handler.clone();
            std::thread::spawn(move || {
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0usize;
                loop {
                    let mut line = String::new();
                    if reader.read_line(&mut line).unwrap_or(0) == 0 {
                        return;
                    }
                    let l = line.trim_end();
                    if l.is_empty() {
                        break;
                    }
                    if let Some((k, v)) = l.split_once(':') {
                        if k.eq_ignore_ascii_case("content-length") {
                            len = v.trim().parse().unwrap();
                        }
                    }
                }
                let mut body = vec![0; len];
                reader.read_exact(&mut body).unwrap();
                let n = counter.fetch_add(1, Ordering::SeqCst);
                let (status, resp) = handler(&Request { body }, n);
                let head = format!(
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
                    resp.len()
                );
                let _ = stream.write_all(head.as_bytes());
                let _ = stream.write_all(&resp);
            });
        }
    });
    (url, count)
}
