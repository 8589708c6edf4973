//! Minimal HTTP/1.1 server for client tests.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

type Handler = dyn Fn(&str) -> (u16, String) + Send + Sync;

#[derive(Default)]
struct Log {
    bodies: Vec<String>,
    auth: Vec<Option<String>>,
}

pub struct TestServer {
    addr: String,
    log: Arc<Mutex<Log>>,
}

impl TestServer {
    pub fn new(handler: Arc<Handler>) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap().to_string();
        let log = Arc::new(Mutex::new(Log::default()));
        let shared = Arc::clone(&log);
        thread::spawn(move || {
            for stream in listener.incoming().flatten() {
                let handler = Arc::clone(&handler);
                let log = Arc::clone(&shared);
                thread::spawn(move || serve(stream, handler.as_ref(), &log));
            }
        });
        Self { addr, log }
    }

    /// Replies in order; the last reply repeats.
    pub fn scripted(replies: Vec<(u16, String)>) -> Self {
        let queue = Mutex::new((replies, 0usize));
        Self::new(Arc::new(move |_| {
            let mut q = queue.lock().unwrap();
            let i = q.1.min(q.0.len() - 1);
            q.1 += 1;
            q.0[i].clone()
        }))
    }

    /// Completes with the request's own prompt after `delay`.
    pub fn echo_prompt(delay: Duration) -> Self {
        Self::new(Arc::new(move |body| {
            thread::sleep(delay);
            let v: serde_json::Value = serde_json::from_str(body).unwrap();
            let text = format!(" {}\n", v["prompt"].as_str().unwrap());
            (200, serde_json::json!({"choices": [{"text": text}]}).to_string())
        }))
    }

    pub fn url(&self) -> String {
        format!("http://{}/v1/completions", self.addr)
    }

    pub fn bodies(&self) -> Vec<String> {
        self.log.lock().unwrap().bodies.clone()
    }

    pub fn auth_headers(&self) -> Vec<Option<String>> {
        self.log.lock().unwrap().auth.clone()
    }
}

fn serve(stream: TcpStream, handler: &Handler, log: &Mutex<Log>) {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut len = 0usize;
    let mut auth = None;
    let mut line = String::new();
    reader.read_line(&mut line).unwrap();
    loop {
        line.clear();
        if reader.read_line(&mut line).unwrap() == 0 || line == "\r\n" {
            break;
        }
        let (name, value) = line.split_once(':').unwrap();
        let value = value.trim().to_owned();
        match name.to_ascii_lowercase().as_str() {
            "content-length" => len = value.parse().unwrap(),
            "authorization" => auth = Some(value),
            _ => {}
        }
    }
    let mut body = vec![0u8; len];
    reader.read_exact(&mut body).unwrap();
    let body = String::from_utf8(body).unwrap();
    {
        let mut l = log.lock().unwrap();
        l.bodies.push(body.clone());
        l.auth.push(auth);
    }
    let (status, reply) = handler(&body);
    let mut out = stream;
    let _ = write!(
        out,
        "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{reply}",
        reply.len()
    );
}
