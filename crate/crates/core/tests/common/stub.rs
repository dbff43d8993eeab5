//! Minimal HTTP stub on an ephemeral port.

use std::sync::{Arc, Mutex};
use std::thread;

use tiny_http::{Header, Response, Server};

pub struct Seen {
    pub method: String,
    pub path: String,
    pub body: String,
    pub authorization: Option<String>,
}

pub struct Stub {
    pub url: String,
    pub seen: Arc<Mutex<Vec<Seen>>>,
    server: Arc<Server>,
    worker: Option<thread::JoinHandle<()>>,
}

impl Stub {
    /// `handler(path, body, call_index)` returns `(status, body)`.
    pub fn start(handler: impl Fn(&str, &str, usize) -> (u16, String) + Send + 'static) -> Self {
        let server = Arc::new(Server::http("127.0.0.1:0").expect("bind stub"));
        let url = format!("http://{}", server.server_addr().to_ip().expect("ip address"));
        let seen = Arc::new(Mutex::new(Vec::new()));
        let (srv, log) = (server.clone(), seen.clone());
        let worker = thread::spawn(move || {
            for mut req in srv.incoming_requests() {
                let mut body = String::new();
                let _ = req.as_reader().read_to_string(&mut body);
                let path = req.url().to_string();
                let authorization = req
                    .headers()
                    .iter()
                    .find(|h| h.field.equiv("Authorization"))
                    .map(|h| h.value.to_string());
                let n = {
                    let mut log = log.lock().unwrap();
                    log.push(Seen {
                        method: req.method().to_string(),
                        path: path.clone(),
                        body: body.clone(),
                        authorization,
                    });
                    log.len() - 1
                };
                let (status, reply) = handler(&path, &body, n);
                let header = Header::from_bytes("Content-Type", "application/json").unwrap();
                let _ = req.respond(Response::from_string(reply).with_status_code(status).with_header(header));
            }
        });
        Self {
            url,
            seen,
            server,
            worker: Some(worker),
        }
    }

    pub fn calls(&self) -> usize {
        self.seen.lock().unwrap().len()
    }
}

impl Drop for Stub {
    fn drop(&mut self) {
        self.server.unblock();
        if let Some(w) = self.worker.take() {
            let _ = w.join();
        }
    }
}
