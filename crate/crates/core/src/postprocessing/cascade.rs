//! Cascade error correction, split into a passive responder (Alice) and a
//! driver (Bob) that batches its parity queries.

use std::collections::{BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::session::wire::ParityRange;

/// Block-doubling passes always run.
pub const PASSES: usize = 4;
pub const MIN_BLOCK: usize = 8;
/// Extra passes run until an error pair sharing a first-pass block is left
/// undetected with probability below 2^-(this + log2(n/k1)).
pub const RESIDUAL_BUDGET_BITS: f64 = 20.0;
const MAX_PASSES: usize = 255;

/// First-pass block size for an expected error rate `q`.
pub fn initial_block_size(q: f64, frame_bits: usize) -> usize {
    if !(q > 0.0) {
        return frame_bits.max(1);
    }
    let k = (0.73 / q).ceil();
    let hi = frame_bits.max(MIN_BLOCK) as f64;
    k.clamp(MIN_BLOCK as f64, hi) as usize
}

/// Top-block size of `pass`. Shuffled passes stop doubling at half a frame
/// so they keep splitting error pairs.
pub fn pass_block_size(k1: usize, pass: usize, n: usize) -> usize {
    let cap = if pass == 0 || n < 2 { n } else { n.div_ceil(2) };
    k1.saturating_mul(1 << pass.min(30)).min(cap).max(1)
}

/// Number of passes for a frame of `n` bits: the doubling passes, then
/// half-frame passes until the shuffled passes separate a given pair of
/// positions with enough certainty.
pub fn pass_count(k1: usize, n: usize) -> usize {
    if n < 2 {
        return PASSES;
    }
    let k1 = k1.max(1);
    let need = RESIDUAL_BUDGET_BITS + (n as f64 / k1 as f64).max(1.0).log2();
    let mut have = 0.0;
    let mut passes = 1;
    while passes < MAX_PASSES && (passes < PASSES || have < need) {
        have += (n.div_ceil(pass_block_size(k1, passes, n)) as f64).log2();
        passes += 1;
    }
    passes
}

/// Pass-order to frame-position maps. Pass 0 is the identity; later passes
/// use a Fisher-Yates shuffle seeded per pass.
#[derive(Debug, Clone)]
pub struct Permutations {
    perms: Vec<Vec<u32>>,
    inverse: Vec<Vec<u32>>,
}

impl Permutations {
    pub fn new(n: usize, seeds: &[u64]) -> Self {
        let mut perms = vec![(0..n as u32).collect::<Vec<_>>()];
        for &s in seeds {
            let mut p: Vec<u32> = (0..n as u32).collect();
            p.shuffle(&mut ChaCha8Rng::seed_from_u64(s));
            perms.push(p);
        }
        let inverse = perms
            .iter()
            .map(|p| {
                let mut inv = vec![0u32; n];
                for (i, &x) in p.iter().enumerate() {
                    inv[x as usize] = i as u32;
                }
                inv
            })
            .collect();
        Self { perms, inverse }
    }

    pub fn passes(&self) -> usize {
        self.perms.len()
    }
}

fn check_range(r: &ParityRange, n: usize, passes: usize) -> Result<()> {
    if r.pass as usize >= passes || r.start >= r.end || r.end as usize > n {
        return Err(Error::Protocol(format!("parity range {r:?} outside frame of {n} bits")));
    }
    Ok(())
}

/// Alice's side: answers parity queries on her fixed frame.
#[derive(Debug, Clone)]
pub struct CascadeResponder {
    n: usize,
    prefix: Vec<Vec<u8>>,
    pub disclosed: u64,
}

impl CascadeResponder {
    pub fn new(bits: &[u8], seeds: &[u64]) -> Self {
        let perms = Permutations::new(bits.len(), seeds);
        let prefix = perms
            .perms
            .iter()
            .map(|p| {
                let mut acc = Vec::with_capacity(bits.len() + 1);
                acc.push(0u8);
                let mut x = 0u8;
                for &i in p {
                    x ^= bits[i as usize];
                    acc.push(x);
                }
                acc
            })
            .collect();
        Self { n: bits.len(), prefix, disclosed: 0 }
    }

    pub fn answer(&mut self, ranges: &[ParityRange]) -> Result<Vec<bool>> {
        let out = ranges
            .iter()
            .map(|r| {
                check_range(r, self.n, self.prefix.len())?;
                let p = &self.prefix[r.pass as usize];
                Ok(p[r.end as usize] ^ p[r.start as usize] == 1)
            })
            .collect::<Result<Vec<_>>>()?;
        self.disclosed += out.len() as u64;
        Ok(out)
    }
}

/// XOR Fenwick tree over a bit array.
#[derive(Debug, Clone)]
struct Fenwick(Vec<u8>);

impl Fenwick {
    fn new(bits: impl Iterator<Item = u8>, n: usize) -> Self {
        let mut t = vec![0u8; n + 1];
        for (i, b) in bits.enumerate() {
            t[i + 1] = b;
        }
        for j in 1..=n {
            let parent = j + (j & j.wrapping_neg());
            if parent <= n {
                t[parent] ^= t[j];
            }
        }
        Self(t)
    }

    fn toggle(&mut self, i: usize) {
        let mut j = i + 1;
        while j < self.0.len() {
            self.0[j] ^= 1;
            j += j & j.wrapping_neg();
        }
    }

    fn prefix(&self, i: usize) -> u8 {
        let mut j = i;
        let mut x = 0;
        while j > 0 {
            x ^= self.0[j];
            j -= j & j.wrapping_neg();
        }
        x
    }

    fn range(&self, s: usize, e: usize) -> u8 {
        self.prefix(e) ^ self.prefix(s)
    }
}

/// Bob's side: corrects his frame through batched parity queries.
#[derive(Debug, Clone)]
pub struct CascadeCorrector {
    n: usize,
    k1: usize,
    original: Vec<u8>,
    bits: Vec<u8>,
    perms: Permutations,
    trees: Vec<Fenwick>,
    known: HashMap<ParityRange, bool>,
    pass: usize,
    outstanding: Option<Vec<ParityRange>>,
    pub disclosed: u64,
    /// Disclosures by the pass order of the queried range.
    pub disclosed_per_pass: Vec<u64>,
    pub rounds: u64,
}

impl CascadeCorrector {
    pub fn new(bits: &[u8], seeds: &[u64], k1: usize) -> Self {
        let n = bits.len();
        let perms = Permutations::new(n, seeds);
        let trees = perms
            .perms
            .iter()
            .map(|p| Fenwick::new(p.iter().map(|&i| bits[i as usize]), n))
            .collect();
        Self {
            n,
            k1: k1.max(1),
            original: bits.to_vec(),
            bits: bits.to_vec(),
            perms,
            trees,
            known: HashMap::new(),
            pass: 0,
            outstanding: None,
            disclosed: 0,
            disclosed_per_pass: vec![0; seeds.len() + 1],
            rounds: 0,
        }
    }

    /// The whole frame has the same parity in every pass order.
    fn key(&self, pass: usize, start: usize, end: usize) -> ParityRange {
        let pass = if start == 0 && end == self.n { 0 } else { pass };
        ParityRange { pass: pass as u8, start: start as u32, end: end as u32 }
    }

    fn flip(&mut self, pass: usize, pos: usize) {
        let i = self.perms.perms[pass][pos] as usize;
        self.bits[i] ^= 1;
        for (q, t) in self.trees.iter_mut().enumerate() {
            t.toggle(self.perms.inverse[q][i] as usize);
        }
    }

    fn top_blocks(&self, pass: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        let k = pass_block_size(self.k1, pass, self.n);
        (0..self.n).step_by(k).map(move |s| (s, (s + k).min(self.n)))
    }

    /// One sweep over every block of the passes done so far. Descends
    /// through known parities, flipping bits it pins down and collecting the
    /// parities it still needs.
    fn search_round(&mut self) -> (BTreeSet<ParityRange>, bool) {
        let mut need = BTreeSet::new();
        let mut flipped = false;
        for q in 0..=self.pass {
            let blocks: Vec<_> = self.top_blocks(q).collect();
            for (s0, e0) in blocks {
                let top = self.known[&self.key(q, s0, e0)] as u8;
                if self.trees[q].range(s0, e0) == top {
                    continue;
                }
                let (mut s, mut e) = (s0, e0);
                while e - s > 1 {
                    let mid = s + (e - s) / 2;
                    let k = self.key(q, s, mid);
                    match self.known.get(&k) {
                        Some(&a) => {
                            if self.trees[q].range(s, mid) != a as u8 {
                                e = mid;
                            } else {
                                s = mid;
                            }
                        }
                        None => {
                            need.insert(k);
                            break;
                        }
                    }
                }
                if e - s == 1 {
                    self.flip(q, s);
                    flipped = true;
                }
            }
        }
        (need, flipped)
    }

    /// Parity queries to send next, or `None` when the frame is finished.
    pub fn next_request(&mut self) -> Option<Vec<ParityRange>> {
        if let Some(r) = &self.outstanding {
            return Some(r.clone());
        }
        if self.n == 0 {
            return None;
        }
        let whole = self.key(0, 0, self.n);
        while self.pass < self.perms.passes() {
            let mut tops: BTreeSet<_> = self
                .top_blocks(self.pass)
                .map(|(s, e)| self.key(self.pass, s, e))
                .filter(|k| !self.known.contains_key(k))
                .collect();
            // The top blocks of any pass XOR to the frame parity, so one of
            // them never needs asking.
            if let (true, Some(&w)) = (self.pass > 0, self.known.get(&whole)) {
                let last = tops.pop_last();
                if let (Some(last), true) = (last, tops.is_empty()) {
                    let others = self
                        .top_blocks(self.pass)
                        .map(|(s, e)| self.key(self.pass, s, e))
                        .filter(|k| *k != last)
                        .fold(w, |acc, k| acc ^ self.known[&k]);
                    self.known.insert(last, others);
                    continue;
                }
            }
            let req = if tops.is_empty() {
                let (need, flipped) = self.search_round();
                if need.is_empty() {
                    if !flipped {
                        if self.pass == 0 {
                            let w = self.top_blocks(0).fold(false, |acc, (s, e)| acc ^ self.known[&self.key(0, s, e)]);
                            self.known.insert(whole, w);
                        }
                        self.pass += 1;
                    }
                    continue;
                }
                need
            } else {
                tops
            };
            let req: Vec<_> = req.into_iter().collect();
            self.outstanding = Some(req.clone());
            return Some(req);
        }
        None
    }

    pub fn absorb(&mut self, parities: &[bool]) -> Result<()> {
        let Some(req) = self.outstanding.take() else {
            return Err(Error::Sequencing("parity response without a request".into()));
        };
        if req.len() != parities.len() {
            return Err(Error::Protocol(format!("{} parities for {} ranges", parities.len(), req.len())));
        }
        for (r, &p) in req.into_iter().zip(parities) {
            self.disclosed_per_pass[r.pass as usize] += 1;
            self.known.insert(r, p);
        }
        self.disclosed += parities.len() as u64;
        self.rounds += 1;
        Ok(())
    }

    pub fn corrected(&self) -> &[u8] {
        &self.bits
    }

    /// Frame positions where the corrected frame differs from the input.
    pub fn error_positions(&self) -> Vec<u32> {
        (0..self.n).filter(|&i| self.bits[i] != self.original[i]).map(|i| i as u32).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CascadeOutcome {
    pub corrected: Vec<u8>,
    pub error_positions: Vec<u32>,
    pub disclosed: u64,
    pub disclosed_per_pass: Vec<u64>,
    pub rounds: u64,
}

/// Runs both roles in-process on one frame. `seeds` holds one seed per
/// shuffled pass, normally `pass_count(k1, n) - 1` of them.
pub fn reconcile(alice: &[u8], bob: &[u8], k1: usize, seeds: &[u64]) -> Result<CascadeOutcome> {
    let mut a = CascadeResponder::new(alice, seeds);
    let mut b = CascadeCorrector::new(bob, seeds, k1);
    while let Some(req) = b.next_request() {
        let ans = a.answer(&req)?;
        b.absorb(&ans)?;
    }
    debug_assert_eq!(a.disclosed, b.disclosed);
    Ok(CascadeOutcome {
        corrected: b.corrected().to_vec(),
        error_positions: b.error_positions(),
        disclosed: b.disclosed,
        disclosed_per_pass: b.disclosed_per_pass.clone(),
        rounds: b.rounds,
    })
}
