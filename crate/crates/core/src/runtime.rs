//! Deterministic in-process multi-worker execution.
//!
//! [`launch`] runs the same program once per rank on its own thread. Workers
//! communicate only through matched point-to-point block messages held in a
//! shared mailbox; sends are buffered and never block, receives block until
//! the counterpart message exists. Collectives are keyed by
//! `(op, partition id, sequence number)`, so programs must issue collectives
//! in the same order on every worker. A receive that can never be satisfied
//! (all other workers finished or equally blocked) is reported as a protocol
//! error instead of deadlocking, and the first worker failure cancels all
//! peers.

use std::collections::HashMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::{Arc, Condvar, Mutex};

use crate::error::{Error, Result};
use crate::partition::{seed_partition_ids, RegionBox, TransferPlan};
use crate::tensor::{copy_region, extract_region, Payload, Scalar};

/// Partition ids minted inside worker programs start here so they cannot
/// collide with partitions created before `launch`.
const WORKER_ID_BASE: u64 = 1 << 32;

/// Collective kind carried by every message.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpTag {
    Broadcast,
    Reduce,
    Repartition,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct MsgKey {
    dst: usize,
    src: usize,
    op: OpTag,
    pid: u64,
    seq: u64,
}

impl MsgKey {
    fn describe(&self) -> String {
        format!(
            "{:?}(pid={}, seq={}) from worker {} to worker {}",
            self.op, self.pid, self.seq, self.src, self.dst
        )
    }
}

/// A block of scalars in transit, tagged with the global region it covers.
#[derive(Debug, Clone)]
pub struct Message {
    pub region: RegionBox,
    pub payload: Payload,
}

struct State {
    mailbox: HashMap<MsgKey, Message>,
    /// Keys the blocked workers are waiting on.
    waiting: HashMap<usize, MsgKey>,
    finished: usize,
    poison: Option<(usize, String)>,
}

struct Shared {
    state: Mutex<State>,
    cv: Condvar,
}

impl Shared {
    fn poison(&self, rank: usize, message: String) {
        let mut st = self.state.lock().unwrap();
        if st.poison.is_none() {
            st.poison = Some((rank, message));
        }
        self.cv.notify_all();
    }
}

/// Per-worker handle used by programs to communicate.
pub struct WorkerContext {
    rank: usize,
    num_workers: usize,
    shared: Arc<Shared>,
    seqs: HashMap<u64, u64>,
}

impl WorkerContext {
    #[inline]
    pub fn rank(&self) -> usize {
        self.rank
    }

    #[inline]
    pub fn num_workers(&self) -> usize {
        self.num_workers
    }

    /// Next sequence number for collectives on partition `pid`. Every worker
    /// must call this the same number of times, in the same program order.
    pub fn next_seq(&mut self, pid: u64) -> u64 {
        let c = self.seqs.entry(pid).or_insert(0);
        let seq = *c;
        *c += 1;
        seq
    }

    /// Buffered, non-blocking send.
    pub fn send_block(
        &self,
        dst: usize,
        op: OpTag,
        pid: u64,
        seq: u64,
        region: RegionBox,
        payload: Payload,
    ) -> Result<()> {
        if dst >= self.num_workers {
            return Err(Error::invalid(format!(
                "send to worker {dst} but only {} workers exist",
                self.num_workers
            )));
        }
        let key = MsgKey { dst, src: self.rank, op, pid, seq };
        let mut st = self.shared.state.lock().unwrap();
        if let Some((rank, msg)) = &st.poison {
            return Err(Error::protocol(format!("aborted by worker {rank}: {msg}")));
        }
        if st.mailbox.insert(key.clone(), Message { region, payload }).is_some() {
            drop(st);
            let msg = format!("duplicate message {}", key.describe());
            self.shared.poison(self.rank, msg.clone());
            return Err(Error::protocol(msg));
        }
        self.shared.cv.notify_all();
        Ok(())
    }

    /// Block until the counterpart message arrives. Errors if the message can
    /// never arrive (all other workers finished or blocked) or a peer failed.
    pub fn recv_block(&self, src: usize, op: OpTag, pid: u64, seq: u64) -> Result<Message> {
        let key = MsgKey { dst: self.rank, src, op, pid, seq };
        let mut st = self.shared.state.lock().unwrap();
        loop {
            if let Some((rank, msg)) = &st.poison {
                return Err(Error::protocol(format!("aborted by worker {rank}: {msg}")));
            }
            if let Some(m) = st.mailbox.remove(&key) {
                st.waiting.remove(&self.rank);
                return Ok(m);
            }
            st.waiting.insert(self.rank, key.clone());
            let stalled = st.waiting.len() + st.finished == self.num_workers
                && st.waiting.values().all(|k| !st.mailbox.contains_key(k));
            if stalled {
                let mut blocked: Vec<_> = st.waiting.iter().collect();
                blocked.sort_by_key(|(r, _)| **r);
                let detail = blocked
                    .iter()
                    .map(|(_, k)| format!("missing {}", k.describe()))
                    .collect::<Vec<_>>()
                    .join("; ");
                let msg = format!("missing counterpart message(s): {detail}");
                st.poison = Some((self.rank, msg.clone()));
                self.shared.cv.notify_all();
                return Err(Error::protocol(msg));
            }
            st = self.shared.cv.wait(st).unwrap();
        }
    }
}

/// Run `program` once per rank on concurrent workers and collect the results
/// in rank order. The first worker failure (error return or panic) cancels
/// the remaining workers and is reported with its rank.
pub fn launch<R, F>(num_workers: usize, program: F) -> Result<Vec<R>>
where
    R: Send,
    F: Fn(&mut WorkerContext) -> Result<R> + Sync,
{
    if num_workers == 0 {
        return Err(Error::invalid("num_workers must be at least 1"));
    }
    let shared = Arc::new(Shared {
        state: Mutex::new(State {
            mailbox: HashMap::new(),
            waiting: HashMap::new(),
            finished: 0,
            poison: None,
        }),
        cv: Condvar::new(),
    });
    let slots: Vec<Mutex<Option<R>>> = (0..num_workers).map(|_| Mutex::new(None)).collect();

    std::thread::scope(|scope| {
        for rank in 0..num_workers {
            let shared = Arc::clone(&shared);
            let program = &program;
            let slot = &slots[rank];
            scope.spawn(move || {
                seed_partition_ids(WORKER_ID_BASE);
                let mut ctx = WorkerContext {
                    rank,
                    num_workers,
                    shared: Arc::clone(&shared),
                    seqs: HashMap::new(),
                };
                let outcome = catch_unwind(AssertUnwindSafe(|| program(&mut ctx)));
                let failure = match outcome {
                    Ok(Ok(value)) => {
                        *slot.lock().unwrap() = Some(value);
                        None
                    }
                    Ok(Err(e)) => Some(e.to_string()),
                    Err(panic) => Some(panic_message(panic)),
                };
                let mut st = shared.state.lock().unwrap();
                st.finished += 1;
                if let Some(msg) = failure {
                    if st.poison.is_none() {
                        st.poison = Some((rank, msg));
                    }
                }
                shared.cv.notify_all();
            });
        }
    });

    let st = shared.state.lock().unwrap();
    if let Some((rank, message)) = &st.poison {
        return Err(Error::Worker {
            rank: *rank,
            message: message.clone(),
        });
    }
    drop(st);
    let mut results = Vec::with_capacity(num_workers);
    for slot in slots {
        results.push(
            slot.into_inner()
                .unwrap()
                .expect("worker finished without result or poison"),
        );
    }
    Ok(results)
}

fn panic_message(panic: Box<dyn std::any::Any + Send>) -> String {
    if let Some(s) = panic.downcast_ref::<&str>() {
        format!("panic: {s}")
    } else if let Some(s) = panic.downcast_ref::<String>() {
        format!("panic: {s}")
    } else {
        "panic".to_string()
    }
}

/// Execute a precomputed [`TransferPlan`]: deliver all sends, then assemble
/// this worker's destination block from the received pieces in plan order.
/// Self-transfers bypass the mailbox but are assembled identically.
pub fn exchange<T: Scalar>(ctx: &mut WorkerContext, plan: &TransferPlan, local: &[T]) -> Result<Vec<T>> {
    let shape = plan.global_shape();
    let src_box = plan.source().region_or_empty(ctx.rank(), shape)?;
    if local.len() != src_box.volume() {
        return Err(Error::invalid(format!(
            "exchange: local buffer holds {} scalars but source region has volume {}",
            local.len(),
            src_box.volume()
        )));
    }
    let pid = plan.source().id();
    let seq = ctx.next_seq(pid);

    let mut kept: HashMap<RegionBox, Vec<T>> = HashMap::new();
    for (peer, region) in plan.sends(ctx.rank()) {
        let block = extract_region(local, &src_box, region);
        if *peer == ctx.rank() {
            kept.insert(region.clone(), block);
        } else {
            ctx.send_block(
                *peer,
                OpTag::Repartition,
                pid,
                seq,
                region.clone(),
                T::into_payload(block),
            )?;
        }
    }

    let dst_box = plan.dest().region_or_empty(ctx.rank(), shape)?;
    let mut out = vec![T::zero(); dst_box.volume()];
    for (peer, region) in plan.recvs(ctx.rank()) {
        let block = if *peer == ctx.rank() {
            kept.remove(region).ok_or_else(|| {
                Error::protocol("exchange: self-transfer block missing from send list".to_string())
            })?
        } else {
            let msg = ctx.recv_block(*peer, OpTag::Repartition, pid, seq)?;
            if msg.region != *region {
                return Err(Error::protocol(format!(
                    "exchange: received region {:?} but plan expects {:?}",
                    msg.region, region
                )));
            }
            T::from_payload(msg.payload)?
        };
        if block.len() != region.volume() {
            return Err(Error::protocol(format!(
                "exchange: block holds {} scalars but region has volume {}",
                block.len(),
                region.volume()
            )));
        }
        copy_region(&block, region, &mut out, &dst_box, region);
    }
    Ok(out)
}

/// Elementwise sum of equal-length buffers over `group`, accumulated at
/// `root` in ascending rank order (bitwise deterministic). Members other
/// than the root receive `None`. The root's own buffer contributes only when
/// the root is a group member. Workers outside `group ∪ {root}` participate
/// only by advancing their sequence counter.
pub fn reduce_sum<T: Scalar>(
    ctx: &mut WorkerContext,
    pid: u64,
    group: &[usize],
    root: usize,
    local: &[T],
) -> Result<Option<Vec<T>>> {
    if group.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid("reduce group must be sorted and unique"));
    }
    let seq = ctx.next_seq(pid);
    let me = ctx.rank();
    if me != root {
        if group.contains(&me) {
            ctx.send_block(
                root,
                OpTag::Reduce,
                pid,
                seq,
                RegionBox::empty(1),
                T::into_payload(local.to_vec()),
            )?;
        }
        return Ok(None);
    }
    let mut acc = vec![T::zero(); local.len()];
    for &r in group {
        if r == root {
            if local.len() != acc.len() {
                return Err(Error::protocol("reduce_sum: buffer length mismatch"));
            }
            for (a, &x) in acc.iter_mut().zip(local) {
                *a = *a + x;
            }
        } else {
            let msg = ctx.recv_block(r, OpTag::Reduce, pid, seq)?;
            let buf = T::from_payload(msg.payload)?;
            if buf.len() != acc.len() {
                return Err(Error::protocol(format!(
                    "reduce_sum: worker {r} sent {} scalars, expected {}",
                    buf.len(),
                    acc.len()
                )));
            }
            for (a, &x) in acc.iter_mut().zip(&buf) {
                *a = *a + x;
            }
        }
    }
    Ok(Some(acc))
}

/// Copy a buffer from `root` to every member of `members`. Pass the buffer on
/// the root; other ranks may pass an empty slice. Every rank in
/// `members ∪ {root}` gets the buffer back.
pub fn group_broadcast<T: Scalar>(
    ctx: &mut WorkerContext,
    pid: u64,
    root: usize,
    members: &[usize],
    local: &[T],
) -> Result<Option<Vec<T>>> {
    let seq = ctx.next_seq(pid);
    let me = ctx.rank();
    if me == root {
        for &r in members {
            if r != root {
                ctx.send_block(
                    r,
                    OpTag::Broadcast,
                    pid,
                    seq,
                    RegionBox::empty(1),
                    T::into_payload(local.to_vec()),
                )?;
            }
        }
        return Ok(Some(local.to_vec()));
    }
    if members.contains(&me) {
        let msg = ctx.recv_block(root, OpTag::Broadcast, pid, seq)?;
        return Ok(Some(T::from_payload(msg.payload)?));
    }
    Ok(None)
}

/// Sum over all workers with the result delivered to all workers
/// (fixed-order reduce to rank 0, then a broadcast back out).
pub fn allreduce_sum<T: Scalar>(ctx: &mut WorkerContext, pid: u64, local: &[T]) -> Result<Vec<T>> {
    let everyone: Vec<usize> = (0..ctx.num_workers()).collect();
    let reduced = reduce_sum(ctx, pid, &everyone, 0, local)?;
    let out = group_broadcast(ctx, pid, 0, &everyone, reduced.as_deref().unwrap_or(&[]))?;
    out.ok_or_else(|| Error::protocol("allreduce: missing broadcast result"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::partition::{transfer_plan, Partition};

    #[test]
    fn launch_returns_results_in_rank_order() {
        let out = launch(1, |ctx| Ok(ctx.rank())).unwrap();
        assert_eq!(out, vec![0]);
        let out = launch(8, |ctx| Ok(ctx.rank())).unwrap();
        assert_eq!(out, (0..8).collect::<Vec<_>>());
        assert!(launch(0, |ctx| Ok(ctx.rank())).is_err());
    }

    #[test]
    fn launch_reports_failing_rank() {
        let err = launch(4, |ctx| {
            if ctx.rank() == 2 {
                return Err(Error::invalid("boom"));
            }
            // peers block on a message from rank 2 that never comes
            let everyone: Vec<usize> = (0..4).collect();
            allreduce_sum::<f64>(ctx, 7, &everyone.iter().map(|_| 1.0).collect::<Vec<_>>())?;
            Ok(())
        })
        .unwrap_err();
        match err {
            Error::Worker { rank, message } => {
                assert_eq!(rank, 2);
                assert!(message.contains("boom"));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn launch_reports_panics() {
        let err = launch(2, |ctx| -> Result<()> {
            if ctx.rank() == 1 {
                panic!("bad worker");
            }
            reduce_sum::<f64>(ctx, 1, &[0, 1], 0, &[1.0])?;
            Ok(())
        })
        .unwrap_err();
        match err {
            Error::Worker { rank, message } => {
                assert_eq!(rank, 1);
                assert!(message.contains("bad worker"));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn mismatched_sequences_are_a_protocol_error() {
        // Rank 0 performs an extra collective on the same partition id, so the
        // sequence numbers never line up and the runtime detects the stall.
        let err = launch(2, |ctx| {
            if ctx.rank() == 0 {
                reduce_sum::<f64>(ctx, 42, &[0], 0, &[1.0])?;
            }
            let r = reduce_sum::<f64>(ctx, 42, &[0, 1], 0, &[1.0, 2.0])?;
            Ok(r)
        })
        .unwrap_err();
        match err {
            Error::Worker { message, .. } => assert!(message.contains("missing counterpart")),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn reduce_examples() {
        let out = launch(1, |ctx| reduce_sum::<f64>(ctx, 1, &[0], 0, &[3.0, 4.0])).unwrap();
        assert_eq!(out[0].as_deref(), Some(&[3.0, 4.0][..]));

        let out = launch(3, |ctx| reduce_sum::<f64>(ctx, 1, &[0, 1, 2], 0, &[1.0; 4])).unwrap();
        assert_eq!(out[0].as_deref(), Some(&[3.0, 3.0, 3.0, 3.0][..]));
        assert!(out[1].is_none());

        // fixed ascending-rank order: (a + b) + c exactly
        let vals = [0.1, 0.2, 0.3];
        let out = launch(3, |ctx| {
            reduce_sum::<f64>(ctx, 1, &[0, 1, 2], 0, &[vals[ctx.rank()]])
        })
        .unwrap();
        let expect = (0.1f64 + 0.2) + 0.3;
        assert_eq!(out[0].as_deref(), Some(&[expect][..]));
    }

    #[test]
    fn reduce_length_mismatch_is_protocol_error() {
        let err = launch(2, |ctx| {
            let buf = if ctx.rank() == 0 { vec![1.0, 2.0] } else { vec![1.0] };
            reduce_sum::<f64>(ctx, 1, &[0, 1], 0, &buf)
        })
        .unwrap_err();
        match err {
            Error::Worker { rank, message } => {
                assert_eq!(rank, 0);
                assert!(message.contains("length mismatch") || message.contains("expected"));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn exchange_redistributes_enumerated_vector() {
        let src = Partition::new(&[2]).unwrap();
        let dst = Partition::new(&[4]).unwrap();
        let plan = transfer_plan(&src, &dst, &[8]).unwrap();
        let out = launch(4, |ctx| {
            let local: Vec<f64> = if ctx.rank() < 2 {
                let region = plan.source().local_region(ctx.rank(), &[8]).unwrap();
                (region.range(0).start..region.range(0).stop).map(|i| i as f64).collect()
            } else {
                Vec::new()
            };
            exchange(ctx, &plan, &local)
        })
        .unwrap();
        assert_eq!(out[0], vec![0.0, 1.0]);
        assert_eq!(out[1], vec![2.0, 3.0]);
        assert_eq!(out[2], vec![4.0, 5.0]);
        assert_eq!(out[3], vec![6.0, 7.0]);
    }

    #[test]
    fn exchange_identity_plan_is_bitwise() {
        let p = Partition::new(&[2, 2]).unwrap();
        let plan = transfer_plan(&p, &p, &[5, 6]).unwrap();
        let out = launch(4, |ctx| {
            let region = p.local_region(ctx.rank(), &[5, 6]).unwrap();
            let local: Vec<f64> = (0..region.volume())
                .map(|i| (ctx.rank() * 100 + i) as f64 * 0.25)
                .collect();
            let got = exchange(ctx, &plan, &local)?;
            Ok(got == local)
        })
        .unwrap();
        assert!(out.iter().all(|&b| b));
    }

    #[test]
    fn exchange_empty_receive_list_yields_empty_buffer() {
        // 4 source workers collapse into a single dest worker; ranks 1..3
        // receive nothing.
        let src = Partition::new(&[4]).unwrap();
        let dst = Partition::new(&[1]).unwrap();
        let plan = transfer_plan(&src, &dst, &[4]).unwrap();
        let out = launch(4, |ctx| {
            let local = vec![ctx.rank() as f64];
            exchange(ctx, &plan, &local)
        })
        .unwrap();
        assert_eq!(out[0], vec![0.0, 1.0, 2.0, 3.0]);
        assert!(out[1].is_empty());
        assert!(out[3].is_empty());
    }

    #[test]
    fn results_are_schedule_independent() {
        // Repeated runs across real thread interleavings must be bitwise equal.
        let src = Partition::new(&[3]).unwrap();
        let dst = Partition::new(&[2]).unwrap();
        let plan = transfer_plan(&src, &dst, &[7]).unwrap();
        let run = || {
            launch(3, |ctx| {
                let region = plan.source().local_region(ctx.rank(), &[7]).unwrap();
                let local: Vec<f64> = (region.range(0).start..region.range(0).stop)
                    .map(|i| (i as f64).sin())
                    .collect();
                let redistributed = exchange(ctx, &plan, &local)?;
                allreduce_sum(ctx, 9, &[redistributed.iter().sum::<f64>()])
            })
            .unwrap()
        };
        let first = run();
        for _ in 0..20 {
            let again = run();
            assert_eq!(first, again);
        }
    }
}
