#![allow(dead_code)]

use std::sync::Arc;
use std::thread;

use castorette::http;
use castorette::ingest::IngestOptions;
use castorette_core::platform::{Platform, PlatformConfig};
use castorette_core::scheduler::Clock;
use castorette_core::time::Timestamp;
use ureq::Agent;

pub struct Server {
    pub base: String,
    pub platform: Platform,
    agent: Agent,
    stop: Option<tokio::sync::oneshot::Sender<()>>,
    join: Option<thread::JoinHandle<()>>,
}

impl Server {
    /// In-memory platform on a virtual clock, served on an ephemeral port.
    pub fn start(at: Timestamp) -> Self {
        let platform = Platform::open(PlatformConfig {
            clock: Arc::new(Clock::virtual_at(at)),
            ..PlatformConfig::default()
        })
        .unwrap();
        let router = http::router(platform.bus.clone(), IngestOptions::default());
        let (addr_tx, addr_rx) = std::sync::mpsc::channel();
        let (stop_tx, stop_rx) = tokio::sync::oneshot::channel::<()>();
        let join = thread::spawn(move || {
            let rt = tokio::runtime::Builder::new_multi_thread().worker_threads(2).enable_all().build().unwrap();
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
                addr_tx.send(listener.local_addr().unwrap()).unwrap();
                http::serve(listener, router, async {
                    let _ = stop_rx.await;
                })
                .await
                .unwrap();
            });
        });
        let addr = addr_rx.recv().unwrap();
        Self {
            base: format!("http://{addr}"),
            platform,
            agent: agent(),
            stop: Some(stop_tx),
            join: Some(join),
        }
    }

    pub fn get(&self, path: &str, query: &[(&str, &str)]) -> (u16, Vec<u8>) {
        get(&self.agent, &format!("{}{path}", self.base), query)
    }

    pub fn send(&self, method: &str, path: &str, body: &[u8]) -> (u16, Vec<u8>) {
        send(&self.agent, method, &format!("{}{path}", self.base), body)
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        if let Some(s) = self.stop.take() {
            let _ = s.send(());
        }
        if let Some(j) = self.join.take() {
            let _ = j.join();
        }
    }
}

pub fn agent() -> Agent {
    Agent::config_builder().http_status_as_error(false).build().into()
}

pub fn get(agent: &Agent, url: &str, query: &[(&str, &str)]) -> (u16, Vec<u8>) {
    let mut req = agent.get(url);
    for (k, v) in query {
        req = req.query(*k, *v);
    }
    let mut resp = req.call().unwrap();
    (resp.status().as_u16(), resp.body_mut().read_to_vec().unwrap())
}

pub fn send(agent: &Agent, method: &str, url: &str, body: &[u8]) -> (u16, Vec<u8>) {
    let mut resp = match method {
        "PUT" => agent.put(url).header("content-type", "application/json").send(body),
        "POST" => agent.post(url).header("content-type", "application/json").send(body),
        m => panic!("unsupported method {m}"),
    }
    .unwrap();
    (resp.status().as_u16(), resp.body_mut().read_to_vec().unwrap())
}

pub fn json(bytes: &[u8]) -> serde_json::Value {
    serde_json::from_slice(bytes).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(bytes)))
}
