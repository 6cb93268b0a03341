//! Michael-Scott lock-free FIFO queue.

use std::cell::UnsafeCell;
use std::sync::atomic::Ordering::{AcqRel, Acquire, Relaxed, Release};
use std::sync::Arc;

use crate::marked::{Atomic, MarkedPtr};
use crate::reclaim::{Canary, Guard, Handle, Retired, Scheme};

struct Node<T> {
    canary: Canary,
    // Owned by whichever dequeuer swings head onto this node.
    value: UnsafeCell<Option<T>>,
    next: Atomic<Node<T>, 0>,
}

pub struct Queue<T, S: Scheme> {
    head: Atomic<Node<T>, 0>,
    tail: Atomic<Node<T>, 0>,
    domain: Arc<S>,
}

// SAFETY: values move between threads through enqueue/dequeue; node memory
// is managed by the scheme.
unsafe impl<T: Send, S: Scheme> Send for Queue<T, S> {}
unsafe impl<T: Send, S: Scheme> Sync for Queue<T, S> {}

impl<T: Send + 'static, S: Scheme> Queue<T, S> {
    pub fn new(h: &Handle<S>) -> Self {
        let sentinel = MarkedPtr::new(
            h.alloc(Node {
                canary: Canary::new(),
                value: UnsafeCell::new(None),
                next: Atomic::null(),
            }),
            0,
        );
        Queue {
            head: Atomic::new(sentinel),
            tail: Atomic::new(sentinel),
            domain: h.domain().clone(),
        }
    }

    pub fn enqueue(&self, h: &Handle<S>, value: T) {
        let node = MarkedPtr::new(
            h.alloc(Node {
                canary: Canary::new(),
                value: UnsafeCell::new(Some(value)),
                next: Atomic::null(),
            }),
            0,
        );
        let mut tail: Guard<'_, Node<T>, S, 0> = h.guard();
        loop {
            let t = tail.acquire(&self.tail);
            h.check(&tail.canary);
            let next = tail.next.load(Acquire);
            if self.tail.load(Acquire) != t {
                continue;
            }
            if !next.is_null() {
                let _ = self.tail.compare_exchange(t, next, AcqRel, Relaxed);
                continue;
            }
            if tail
                .next
                .compare_exchange(MarkedPtr::null(), node, AcqRel, Relaxed)
                .is_ok()
            {
                let _ = self.tail.compare_exchange(t, node, AcqRel, Relaxed);
                return;
            }
        }
    }

    pub fn dequeue(&self, h: &Handle<S>) -> Option<T> {
        let mut head: Guard<'_, Node<T>, S, 0> = h.guard();
        let mut next: Guard<'_, Node<T>, S, 0> = h.guard();
        loop {
            let hd = head.acquire(&self.head);
            h.check(&head.canary);
            let nx = next.acquire(&head.next);
            if self.head.load(Acquire) != hd {
                continue;
            }
            if nx.is_null() {
                return None;
            }
            h.check(&next.canary);
            if self.tail.load(Acquire) == hd {
                let _ = self.tail.compare_exchange(hd, nx, AcqRel, Relaxed);
                continue;
            }
            if self.head.compare_exchange(hd, nx, AcqRel, Relaxed).is_ok() {
                // SAFETY: winning the head CAS makes us the value's only owner.
                let value = unsafe { (*next.value.get()).take() };
                // SAFETY: the old sentinel is unreachable and we won its unlink.
                unsafe { head.reclaim() };
                return value;
            }
        }
    }

    pub fn is_empty(&self, h: &Handle<S>) -> bool {
        let head = h.acquire(&self.head);
        h.check(&head.canary);
        head.next.load(Acquire).is_null()
    }

    /// Values currently queued, front first. Only meaningful when no other
    /// thread mutates the queue.
    pub fn drain_quiescent(&mut self) -> Vec<T> {
        let mut out = Vec::new();
        // SAFETY: `&mut self` excludes concurrent access.
        unsafe {
            let mut cur = (*self.head.load(Relaxed).get()).next.load(Relaxed);
            while !cur.is_null() {
                let node = &*cur.get();
                out.extend((*node.value.get()).take());
                cur = node.next.load(Relaxed);
            }
        }
        out
    }
}

impl<T, S: Scheme> Drop for Queue<T, S> {
    fn drop(&mut self) {
        let mut cur = self.head.load(Relaxed);
        while !cur.is_null() {
            // SAFETY: exclusive access; every node still linked is owned here.
            unsafe {
                let next = (*cur.get()).next.load(Relaxed);
                self.domain.core().reclaim_detached(Retired::new(cur.get()));
                cur = next;
            }
        }
        self.tail.store(MarkedPtr::null(), Release);
    }
}
