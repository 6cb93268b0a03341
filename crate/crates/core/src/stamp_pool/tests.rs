use super::*;
use std::sync::Arc;

fn raw(public: u64) -> u64 {
    public + BIAS
}

#[test]
fn fresh_pool_reports_initial_stamp() {
    let pool = StampPool::new(40);
    assert_eq!(pool.highest_stamp(), 40);
    assert_eq!(pool.lowest_stamp(), 40);
}

#[test]
fn push_into_empty_pool() {
    let pool = StampPool::new(0);
    let b = pool.acquire_block();
    assert_eq!(pool.push(b), 0);
    assert_eq!(pool.highest_stamp(), 4);
    assert_eq!(pool.head().peek_prev().get(), b.addr());
    assert_eq!(b.peek_prev().get(), pool.tail().addr());
    assert_eq!(b.peek_stamp(), raw(0));
    assert_eq!(
        classify(b.peek_stamp(), b.peek_prev(), b.peek_next()),
        Some(BlockState::InQueue)
    );
}

#[test]
fn sequential_pushes_are_spaced_by_four() {
    let pool = StampPool::new(0);
    let stamps: Vec<u64> = (0..3).map(|_| pool.push(pool.acquire_block())).collect();
    assert_eq!(stamps, vec![0, 4, 8]);
    let chain: Vec<u64> = pool
        .prev_chain()
        .unwrap()
        .iter()
        .map(|b| StampPool::public_stamp(b.peek_stamp()))
        .collect();
    assert_eq!(chain, vec![8, 4, 0]);
}

#[test]
fn sole_block_remove_advances_tail() {
    let pool = StampPool::new(0);
    let b = pool.acquire_block();
    let s = pool.push(b);
    assert!(pool.remove(b));
    assert_eq!(pool.lowest_stamp(), s + 4);
    assert_eq!(
        classify(b.peek_stamp(), b.peek_prev(), b.peek_next()),
        Some(BlockState::Removed)
    );
    assert_eq!(pool.head().peek_prev().get(), pool.tail().addr());
}

#[test]
fn oldest_leaving_hands_tail_to_survivor() {
    let pool = StampPool::new(0);
    let t1 = pool.acquire_block();
    let t2 = pool.acquire_block();
    let t3 = pool.acquire_block();
    pool.push(t1);
    pool.push(t2);
    let s3 = pool.push(t3);
    assert!(!pool.remove(t2));
    assert_eq!(pool.lowest_stamp(), 0);
    assert!(pool.remove(t1));
    assert_eq!(pool.lowest_stamp(), s3);
    assert!(pool.remove(t3));
    assert_eq!(pool.lowest_stamp(), s3 + 4);
}

#[test]
fn middle_block_is_unlinked_from_both_directions() {
    let pool = StampPool::new(0);
    let a = pool.acquire_block();
    let b = pool.acquire_block();
    let c = pool.acquire_block();
    pool.push(a);
    pool.push(b);
    pool.push(c);
    assert!(!pool.remove(b));
    assert_eq!(c.peek_prev().get(), a.addr());
    assert_eq!(a.peek_next().get(), c.addr());
    assert_eq!(pool.prev_chain().unwrap().len(), 2);
}

#[test]
fn recycled_block_gets_a_larger_stamp() {
    let pool = StampPool::new(0);
    let a = pool.acquire_block();
    let b = pool.acquire_block();
    let first = pool.push(a);
    pool.push(b);
    pool.remove(a);
    let again = pool.push(a);
    assert!(again > first);
    let chain: Vec<*const Block> = pool
        .prev_chain()
        .unwrap()
        .iter()
        .map(|b| b.addr())
        .collect();
    assert_eq!(chain, vec![a.addr(), b.addr()]);
    pool.remove(b);
    pool.remove(a);
    assert!(pool.prev_chain().unwrap().is_empty());
}

#[test]
fn released_blocks_are_reused() {
    let pool = StampPool::new(0);
    let a = pool.acquire_block();
    pool.release_block(a);
    assert_eq!(pool.acquire_block().addr(), a.addr());
    assert_eq!(pool.blocks().len(), 1);
}

#[test]
fn mark_next_sets_mark_on_stable_stamp() {
    let pool = StampPool::new(0);
    let a = pool.acquire_block();
    pool.push(a);
    let s = a.peek_stamp();
    assert!(!a.peek_next().is_marked());
    assert!(pool.mark_next(a, s));
    assert!(a.peek_next().is_marked());
    let tag = a.peek_next().tag();
    assert!(pool.mark_next(a, s));
    assert_eq!(a.peek_next().tag(), tag);
}

#[test]
fn mark_next_gives_up_after_stamp_change() {
    let pool = StampPool::new(0);
    let a = pool.acquire_block();
    pool.push(a);
    let stale = a.peek_stamp();
    pool.remove(a);
    pool.push(a);
    let before = a.peek_next();
    assert!(!pool.mark_next(a, stale));
    assert_eq!(a.peek_next(), before);
}

#[test]
fn move_next_helps_finish_a_pending_push() {
    let pool = StampPool::new(0);
    let head = pool.head();
    let b = pool.acquire_block();
    // Replay the first half of a push by hand: linked but still pending.
    b.next.store(head);
    let head_prev = head.prev.load();
    let s = head.stamp.fetch_add(STAMP_INC, Ordering::SeqCst);
    b.store_stamp(s - (STAMP_INC - PENDING_PUSH));
    b.prev.store(head_prev.get());
    head.prev.cas(head_prev, b).unwrap();
    assert_eq!(
        classify(b.peek_stamp(), b.peek_prev(), b.peek_next()),
        Some(BlockState::Inserting)
    );

    let mut next = LinkVal::new(head, 0, false);
    let mut last = LinkVal::default();
    pool.move_next(head.prev.load(), &mut next, &mut last);
    assert_eq!(b.peek_stamp(), s);
    assert_eq!(next.get(), b.addr());
    assert_eq!(last.get(), head.addr());
}

#[test]
fn move_next_advances_when_owner_already_finished() {
    let pool = StampPool::new(0);
    let b = pool.acquire_block();
    pool.push(b);
    let mut next = LinkVal::new(pool.head(), 0, false);
    let mut last = LinkVal::default();
    pool.move_next(pool.head().prev.load(), &mut next, &mut last);
    assert_eq!(next.get(), b.addr());
}

#[test]
fn remove_or_skip_leaves_unmarked_cursor_alone() {
    let pool = StampPool::new(0);
    let b = pool.acquire_block();
    pool.push(b);
    let mut next = pool.head().prev.load();
    let before = next;
    let mut last = LinkVal::default();
    let np = b.prev.load();
    assert!(!pool.remove_or_skip_marked_block(&mut next, &mut last, np, b.peek_stamp()));
    assert_eq!(next, before);
}

#[test]
fn remove_or_skip_retreats_without_last() {
    let pool = StampPool::new(0);
    let b = pool.acquire_block();
    pool.push(b);
    b.prev.set_mark();
    let mut next = pool.head().prev.load();
    let mut last = LinkVal::default();
    let np = b.prev.load();
    assert!(pool.remove_or_skip_marked_block(&mut next, &mut last, np, b.peek_stamp()));
    assert_eq!(next.get(), pool.head().addr());
}

#[test]
fn remove_or_skip_unlinks_with_last() {
    let pool = StampPool::new(0);
    let a = pool.acquire_block();
    let b = pool.acquire_block();
    pool.push(a);
    pool.push(b);
    b.prev.set_mark();
    let mut last = LinkVal::new(pool.head(), 0, false);
    let mut next = pool.head().prev.load();
    let np = b.prev.load();
    assert!(pool.remove_or_skip_marked_block(&mut next, &mut last, np, b.peek_stamp()));
    assert_eq!(pool.head().peek_prev().get(), a.addr());
    assert!(b.peek_next().is_marked());
    assert!(last.is_null());
}

#[test]
fn update_tail_never_lowers() {
    let pool = StampPool::new(0);
    pool.tail().stamp.store(raw(100), Ordering::SeqCst);
    pool.update_tail_stamp(raw(8));
    assert_eq!(pool.lowest_stamp(), 100);
}

#[test]
fn update_tail_prefers_identified_successor() {
    let pool = StampPool::new(0);
    let a = pool.acquire_block();
    let b = pool.acquire_block();
    pool.push(a);
    let sb = pool.push(b);
    pool.remove(a);
    assert_eq!(pool.lowest_stamp(), sb);
}

#[test]
fn concurrent_stamps_are_distinct_multiples_of_four() {
    let pool = Arc::new(StampPool::new(0));
    let per_thread = 2000;
    let handles: Vec<_> = (0..4)
        .map(|_| {
            let pool = pool.clone();
            std::thread::spawn(move || {
                let b = pool.acquire_block();
                let mut seen = Vec::with_capacity(per_thread);
                for _ in 0..per_thread {
                    let s = pool.push(b);
                    assert!(pool.lowest_stamp() <= s);
                    seen.push(s);
                    pool.remove(b);
                }
                pool.release_block(b);
                seen
            })
        })
        .collect();
    let mut all: Vec<u64> = handles
        .into_iter()
        .flat_map(|h| h.join().unwrap())
        .collect();
    let n = all.len();
    assert!(all.iter().all(|s| s % 4 == 0));
    all.sort_unstable();
    all.dedup();
    assert_eq!(all.len(), n);
    assert!(pool.prev_chain().unwrap().is_empty());
    assert!(pool.lowest_stamp() > *all.last().unwrap());
}
