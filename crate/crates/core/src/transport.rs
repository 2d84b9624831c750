//! In-process stand-in for message passing between parts. Every cross-part
//! data movement in the pipeline goes through [`Transport::exchange`] or
//! [`Transport::reduce`], which keeps the bulk-synchronous structure explicit
//! and countable.

use std::sync::atomic::{AtomicU64, Ordering};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum TransportError {
    #[error("part {from} addressed a message to part {to}, only {parts} parts exist")]
    BadDestination { from: usize, to: usize, parts: usize },
    #[error("expected one contribution per part ({expected}), got {got}")]
    PartCount { expected: usize, got: usize },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum TransportMode {
    /// Parts run one after another on the calling thread.
    #[default]
    Serial,
    /// One scoped thread per part for each superstep.
    Threaded,
}

/// Exchange and reduction counters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TransportCounters {
    pub exchanges: u64,
    pub reductions: u64,
    pub messages: u64,
}

#[derive(Debug, Default)]
pub struct Transport {
    mode: TransportMode,
    exchanges: AtomicU64,
    reductions: AtomicU64,
    messages: AtomicU64,
}

impl Transport {
    pub fn new(mode: TransportMode) -> Self {
        Transport {
            mode,
            ..Default::default()
        }
    }

    pub fn serial() -> Self {
        Self::new(TransportMode::Serial)
    }

    pub fn mode(&self) -> TransportMode {
        self.mode
    }

    pub fn counters(&self) -> TransportCounters {
        TransportCounters {
            exchanges: self.exchanges.load(Ordering::Relaxed),
            reductions: self.reductions.load(Ordering::Relaxed),
            messages: self.messages.load(Ordering::Relaxed),
        }
    }

    /// Run `f` once per part and collect the results in part order.
    pub fn superstep<T, F>(&self, parts: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync,
    {
        match self.mode {
            TransportMode::Serial => (0..parts).map(&f).collect(),
            TransportMode::Threaded if parts <= 1 => (0..parts).map(&f).collect(),
            TransportMode::Threaded => std::thread::scope(|s| {
                let f = &f;
                let handles: Vec<_> = (0..parts).map(|p| s.spawn(move || f(p))).collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("part panicked"))
                    .collect()
            }),
        }
    }

    /// Deliver `outboxes[p] = [(destination, message), ..]`. Each inbox
    /// lists `(source, message)` ordered by source part, then by send order.
    pub fn exchange<M: Send>(
        &self,
        outboxes: Vec<Vec<(usize, M)>>,
    ) -> Result<Vec<Vec<(usize, M)>>, TransportError> {
        let parts = outboxes.len();
        let mut inboxes: Vec<Vec<(usize, M)>> = (0..parts).map(|_| Vec::new()).collect();
        let mut count = 0;
        for (from, outbox) in outboxes.into_iter().enumerate() {
            for (to, msg) in outbox {
                if to >= parts {
                    return Err(TransportError::BadDestination { from, to, parts });
                }
                inboxes[to].push((from, msg));
                count += 1;
            }
        }
        self.exchanges.fetch_add(1, Ordering::Relaxed);
        self.messages.fetch_add(count, Ordering::Relaxed);
        Ok(inboxes)
    }

    /// Combine one contribution per part in fixed part order.
    pub fn reduce<T>(
        &self,
        parts: usize,
        contributions: Vec<T>,
        combine: impl Fn(T, T) -> T,
    ) -> Result<T, TransportError> {
        if contributions.len() != parts || parts == 0 {
            return Err(TransportError::PartCount {
                expected: parts,
                got: contributions.len(),
            });
        }
        self.reductions.fetch_add(1, Ordering::Relaxed);
        let mut it = contributions.into_iter();
        let first = it.next().expect("non-empty");
        Ok(it.fold(first, combine))
    }
}
