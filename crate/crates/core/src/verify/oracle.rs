//! A sequential model of Stamp-it for serialized histories.
//!
//! The model tracks which threads are in a region and with which stamp,
//! `head` (next stamp to hand out), `tail` (lowest stamp) and every retire
//! list. [`replay`] drives the real scheme through the same history with one
//! handle per logical thread, all on the calling OS thread, so both can be
//! compared event by event.

use std::collections::{BTreeMap, VecDeque};
use std::sync::{Arc, Mutex};

use rand::Rng;
use thiserror::Error;

use crate::reclaim::Handle;
use crate::stamp_it::{StampIt, StampItConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Event {
    Register(usize),
    Enter(usize),
    Leave(usize),
    /// Retires a fresh node; node ids are assigned in retire order from 0.
    Retire(usize),
    Exit(usize),
}

/// What a single event produced.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Outcome {
    /// The stamp drawn by `Enter` or attached by `Retire`.
    pub stamp: Option<u64>,
    /// Ids of nodes destroyed by this event, sorted.
    pub reclaimed: Vec<u64>,
    pub highest: u64,
    pub lowest: u64,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum HistoryError {
    #[error("event {index}: thread {thread} is not registered")]
    Unregistered { index: usize, thread: usize },
    #[error("event {index}: thread {thread} is already registered")]
    Registered { index: usize, thread: usize },
    #[error("event {index}: thread {thread} is not in a region")]
    OutsideRegion { index: usize, thread: usize },
    #[error("event {index}: thread {thread} is already in a region")]
    InsideRegion { index: usize, thread: usize },
}

#[derive(Debug, Default)]
struct ThreadModel {
    stamp: Option<u64>,
    local: VecDeque<(u64, u64)>,
}

#[derive(Debug)]
pub struct SequentialPoolOracle {
    inc: u64,
    threshold: usize,
    head: u64,
    tail: u64,
    threads: BTreeMap<usize, ThreadModel>,
    global: Vec<VecDeque<(u64, u64)>>,
    next_id: u64,
    index: usize,
}

impl SequentialPoolOracle {
    pub fn new(inc: u64, initial: u64, threshold: usize) -> Self {
        SequentialPoolOracle {
            inc,
            threshold,
            head: initial,
            tail: initial,
            threads: BTreeMap::new(),
            global: Vec::new(),
            next_id: 0,
            index: 0,
        }
    }

    pub fn highest(&self) -> u64 {
        self.head
    }

    pub fn lowest(&self) -> u64 {
        self.tail
    }

    pub fn apply(&mut self, ev: Event) -> Result<Outcome, HistoryError> {
        let index = self.index;
        self.index += 1;
        let mut reclaimed = Vec::new();
        let mut stamp = None;
        match ev {
            Event::Register(t) => {
                if self.threads.contains_key(&t) {
                    return Err(HistoryError::Registered { index, thread: t });
                }
                self.threads.insert(t, ThreadModel::default());
            }
            Event::Enter(t) => {
                let th = self.thread(index, t)?;
                if th.stamp.is_some() {
                    return Err(HistoryError::InsideRegion { index, thread: t });
                }
                stamp = Some(self.enter(t));
            }
            Event::Leave(t) => {
                if self.thread(index, t)?.stamp.is_none() {
                    return Err(HistoryError::OutsideRegion { index, thread: t });
                }
                self.leave(t, &mut reclaimed);
            }
            Event::Retire(t) => {
                if self.thread(index, t)?.stamp.is_none() {
                    return Err(HistoryError::OutsideRegion { index, thread: t });
                }
                let id = self.next_id;
                self.next_id += 1;
                let s = self.head;
                self.threads.get_mut(&t).unwrap().local.push_back((s, id));
                stamp = Some(s);
            }
            Event::Exit(t) => {
                if self.thread(index, t)?.stamp.is_some() {
                    return Err(HistoryError::InsideRegion { index, thread: t });
                }
                let residual = std::mem::take(&mut self.threads.get_mut(&t).unwrap().local);
                if !residual.is_empty() {
                    self.global.push(residual);
                }
                self.enter(t);
                self.leave(t, &mut reclaimed);
                self.threads.remove(&t);
            }
        }
        reclaimed.sort_unstable();
        Ok(Outcome {
            stamp,
            reclaimed,
            highest: self.head,
            lowest: self.tail,
        })
    }

    fn thread(&self, index: usize, t: usize) -> Result<&ThreadModel, HistoryError> {
        self.threads
            .get(&t)
            .ok_or(HistoryError::Unregistered { index, thread: t })
    }

    fn enter(&mut self, t: usize) -> u64 {
        let s = self.head;
        self.head += self.inc;
        self.threads.get_mut(&t).unwrap().stamp = Some(s);
        s
    }

    fn leave(&mut self, t: usize, reclaimed: &mut Vec<u64>) {
        let s = self.threads.get_mut(&t).unwrap().stamp.take().unwrap();
        let oldest_remaining = self.threads.values().filter_map(|m| m.stamp).min();
        let was_last = oldest_remaining.is_none_or(|o| o > s);
        if was_last {
            let candidate = match oldest_remaining {
                Some(o) => o,
                None if s + self.inc < self.head.saturating_sub(self.inc) => self.head,
                None => s + self.inc,
            };
            self.tail = self.tail.max(candidate.max(s + self.inc));
        }
        let lowest = self.tail;
        let local = &mut self.threads.get_mut(&t).unwrap().local;
        drain_prefix(local, lowest, reclaimed);
        if was_last {
            for sub in &mut self.global {
                drain_prefix(sub, lowest, reclaimed);
            }
            self.global.retain(|s| !s.is_empty());
        } else if local.len() > self.threshold {
            let moved = std::mem::take(local);
            self.global.push(moved);
        }
    }
}

fn drain_prefix(list: &mut VecDeque<(u64, u64)>, lowest: u64, out: &mut Vec<u64>) {
    while let Some(&(s, id)) = list.front() {
        if s > lowest {
            break;
        }
        list.pop_front();
        out.push(id);
    }
}

/// Runs `history` through the oracle; stops at the first malformed event.
pub fn predict(
    history: &[Event],
    inc: u64,
    threshold: usize,
) -> Result<Vec<Outcome>, HistoryError> {
    let mut oracle = SequentialPoolOracle::new(inc, 0, threshold);
    history.iter().map(|&ev| oracle.apply(ev)).collect()
}

struct Tracked {
    id: u64,
    log: Arc<Mutex<Vec<u64>>>,
}

impl Drop for Tracked {
    fn drop(&mut self) {
        self.log.lock().unwrap().push(self.id);
    }
}

/// Replays a well-formed history against a fresh Stamp-it domain.
///
/// # Panics
/// Panics on malformed histories; validate with [`predict`] first.
pub fn replay(history: &[Event], threshold: usize) -> Vec<Outcome> {
    let domain = Arc::new(StampIt::new(StampItConfig {
        threshold,
        ..Default::default()
    }));
    let log: Arc<Mutex<Vec<u64>>> = Arc::default();
    let mut handles: BTreeMap<usize, Handle<StampIt>> = BTreeMap::new();
    let mut next_id = 0;
    let mut out = Vec::with_capacity(history.len());
    for &ev in history {
        let mut stamp = None;
        match ev {
            Event::Register(t) => {
                handles.insert(t, Handle::register(&domain));
            }
            Event::Enter(t) => {
                handles[&t].enter_nested();
                stamp = Some(domain.pool().highest_stamp() - crate::stamp_pool::STAMP_INC);
            }
            Event::Leave(t) => handles[&t].leave_nested(),
            Event::Retire(t) => {
                let h = &handles[&t];
                let p = h.alloc(Tracked {
                    id: next_id,
                    log: log.clone(),
                });
                next_id += 1;
                // SAFETY: the node was never shared.
                unsafe { h.retire(p) };
                stamp = domain.local_stamps(h.local()).last().copied();
            }
            Event::Exit(t) => {
                handles.remove(&t);
            }
        }
        let mut reclaimed = std::mem::take(&mut *log.lock().unwrap());
        reclaimed.sort_unstable();
        out.push(Outcome {
            stamp,
            reclaimed,
            highest: domain.pool().highest_stamp(),
            lowest: domain.pool().lowest_stamp(),
        });
    }
    for h in handles.values() {
        if h.in_region() {
            h.leave_nested();
        }
    }
    drop(handles);
    out
}

/// The history of the stamp timeline figure: three threads enter in turn,
/// T1 retires n1 after T2 entered, T2 retires n2 after T3 entered, then T2,
/// T1 and T3 leave in that order. Thread ids are 1..=3.
pub fn timeline_history() -> Vec<Event> {
    use Event::*;
    vec![
        Register(1),
        Register(2),
        Register(3),
        Enter(1),
        Enter(2),
        Retire(1),
        Enter(3),
        Retire(2),
        Leave(2),
        Leave(1),
        Leave(3),
    ]
}

/// A random well-formed history of exactly `len` events over at most
/// `max_threads` logical threads.
pub fn random_history(rng: &mut impl Rng, len: usize, max_threads: usize) -> Vec<Event> {
    let mut registered = vec![false; max_threads];
    let mut inside = vec![false; max_threads];
    let mut out = Vec::with_capacity(len);
    while out.len() < len {
        let t = rng.gen_range(0..max_threads);
        let ev = if !registered[t] {
            registered[t] = true;
            Event::Register(t)
        } else if inside[t] {
            match rng.gen_range(0..10) {
                0..=5 => Event::Retire(t),
                _ => {
                    inside[t] = false;
                    Event::Leave(t)
                }
            }
        } else if rng.gen_range(0..12) == 0 {
            registered[t] = false;
            Event::Exit(t)
        } else {
            inside[t] = true;
            Event::Enter(t)
        };
        out.push(ev);
    }
    out
}
