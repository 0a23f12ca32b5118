use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

/// Cumulative bytes moved over the wire, counted per frame including the
/// length prefix.
#[derive(Debug, Default)]
pub struct TrafficLedger {
    upload: AtomicU64,
    download: AtomicU64,
    requests: AtomicU64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrafficTotals {
    pub upload_bytes: u64,
    pub download_bytes: u64,
    pub requests: u64,
}

impl TrafficLedger {
    pub fn new() -> Self {
        Self::default()
    }

    /// One request/response exchange.
    pub fn record(&self, upload: usize, download: usize) {
        self.upload.fetch_add(upload as u64, Ordering::SeqCst);
        self.download.fetch_add(download as u64, Ordering::SeqCst);
        self.requests.fetch_add(1, Ordering::SeqCst);
    }

    pub fn upload_bytes(&self) -> u64 {
        self.upload.load(Ordering::SeqCst)
    }

    pub fn download_bytes(&self) -> u64 {
        self.download.load(Ordering::SeqCst)
    }

    pub fn requests(&self) -> u64 {
        self.requests.load(Ordering::SeqCst)
    }

    pub fn totals(&self) -> TrafficTotals {
        TrafficTotals {
            upload_bytes: self.upload_bytes(),
            download_bytes: self.download_bytes(),
            requests: self.requests(),
        }
    }
}
