//! Task-specific adapters and their per-token integration.
//!
//! Each task owns, in every transformer block, a bottleneck adapter
//! `A(p) = ReLU(p W_down) W_up` and a signature vector `tau`. A token `p` is
//! scored against every task by `cos(p, tau)`; with one task the raw score
//! scales the adapter output, with several tasks the scores are
//! softmax-normalized and the adapter outputs mixed accordingly.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{self, Tensor};
use crate::vit::TokenHook;

#[derive(Clone, Debug, PartialEq)]
pub struct TaskAdapter {
    pub block: usize,
    pub task: usize,
    /// `[d, r]`
    pub w_down: Tensor,
    /// `[r, d]`
    pub w_up: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SignatureVector {
    pub block: usize,
    pub task: usize,
    /// `[d]`
    pub tau: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BankEntry {
    pub adapter: TaskAdapter,
    pub signature: SignatureVector,
    pub frozen: bool,
}

/// How a block combines the adapters of all learned tasks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Integration {
    /// Signature-scored mixing.
    Routed,
    /// Plain sum of adapter outputs, no signatures involved.
    Unrouted,
}

/// Adapters and signatures of every learned task, per block, in task order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterBank {
    dim: usize,
    rank: usize,
    blocks: Vec<Vec<BankEntry>>,
}

impl AdapterBank {
    pub fn new(depth: usize, dim: usize, rank: usize) -> Result<Self> {
        if rank == 0 || rank >= dim {
            return Err(Error::usage(format!("adapter rank must satisfy 0 < r < d, got r={rank}, d={dim}")));
        }
        Ok(Self {
            dim,
            rank,
            blocks: vec![Vec::new(); depth],
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    pub fn task_count(&self) -> usize {
        self.blocks[0].len()
    }

    pub fn entries(&self, block: usize) -> &[BankEntry] {
        &self.blocks[block]
    }

    pub fn entry(&self, block: usize, task: usize) -> &BankEntry {
        &self.blocks[block][task]
    }

    /// Freezes every existing entry and appends a trainable one for `task`.
    /// Tasks are numbered from 0 and must be added in order.
    pub fn add_task<R: Rng>(&mut self, task: usize, rng: &mut R) -> Result<()> {
        let have = self.task_count();
        if task < have {
            return Err(Error::usage(format!("task {task} already has adapters")));
        }
        if task > have {
            return Err(Error::usage(format!("task {task} added before task {have}")));
        }
        let (d, r) = (self.dim, self.rank);
        let a = 1.0 / (d as f64).sqrt();
        let down = Uniform::new_inclusive(-a, a).expect("valid range");
        for (block, entries) in self.blocks.iter_mut().enumerate() {
            entries.iter_mut().for_each(|e| e.frozen = true);
            let w_down = Tensor::from_parts(vec![d, r], (0..d * r).map(|_| down.sample(rng)).collect());
            let tau = Tensor::from_parts(vec![d], (0..d).map(|_| StandardNormal.sample(rng)).collect());
            entries.push(BankEntry {
                adapter: TaskAdapter {
                    block,
                    task,
                    w_down,
                    w_up: Tensor::zeros([r, d]),
                },
                signature: SignatureVector { block, task, tau },
                frozen: false,
            });
        }
        Ok(())
    }

    pub fn freeze_all(&mut self) {
        self.blocks.iter_mut().flatten().for_each(|e| e.frozen = true);
    }

    /// A copy holding only the first `tasks` tasks.
    pub fn truncated(&self, tasks: usize) -> Self {
        Self {
            dim: self.dim,
            rank: self.rank,
            blocks: self.blocks.iter().map(|b| b[..tasks.min(b.len())].to_vec()).collect(),
        }
    }

    /// Trainable tensors in a fixed order: for each block, each unfrozen
    /// entry's `w_down`, `w_up`, `tau`.
    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for e in self.blocks.iter_mut().flatten().filter(|e| !e.frozen) {
            out.push(&mut e.adapter.w_down);
            out.push(&mut e.adapter.w_up);
            out.push(&mut e.signature.tau);
        }
        out
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut c = Checkpoint::new();
        for (b, entries) in self.blocks.iter().enumerate() {
            for (t, e) in entries.iter().enumerate() {
                c.insert(format!("block{b}/task{t}/w_down"), e.adapter.w_down.clone())?;
                c.insert(format!("block{b}/task{t}/w_up"), e.adapter.w_up.clone())?;
                c.insert(format!("block{b}/task{t}/tau"), e.signature.tau.clone())?;
            }
        }
        c.set_meta("depth", self.depth().to_string());
        c.set_meta("dim", self.dim.to_string());
        c.set_meta("rank", self.rank.to_string());
        c.set_meta("tasks", self.task_count().to_string());
        let frozen: Vec<String> = self.blocks[0].iter().map(|e| e.frozen.to_string()).collect();
        c.set_meta("frozen", frozen.join(","));
        Ok(c)
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let num = |key: &str| -> Result<usize> {
            c.meta(key)?
                .parse()
                .map_err(|_| Error::usage(format!("adapter bank metadata `{key}` is not a count")))
        };
        let mut bank = Self::new(num("depth")?, num("dim")?, num("rank")?)?;
        let tasks = num("tasks")?;
        let frozen: Vec<bool> = c.meta("frozen")?.split(',').filter(|s| !s.is_empty()).map(|s| s == "true").collect();
        if frozen.len() != tasks {
            return Err(Error::usage("adapter bank frozen flags do not match task count"));
        }
        for (b, entries) in bank.blocks.iter_mut().enumerate() {
            for (t, &frozen) in frozen.iter().enumerate() {
                let get = |name: &str| c.get(&format!("block{b}/task{t}/{name}")).cloned();
                entries.push(BankEntry {
                    adapter: TaskAdapter {
                        block: b,
                        task: t,
                        w_down: get("w_down")?,
                        w_up: get("w_up")?,
                    },
                    signature: SignatureVector {
                        block: b,
                        task: t,
                        tau: get("tau")?,
                    },
                    frozen,
                });
            }
        }
        Ok(bank)
    }
}

/// `ReLU(p W_down) W_up` for one token.
pub fn adapter_forward(p: &[f64], adapter: &TaskAdapter) -> Result<Tensor> {
    let d = adapter.w_down.rows();
    if p.len() != d {
        return Err(Error::dim("adapter_forward", d, p.len()));
    }
    let row = Tensor::from_parts(vec![1, d], p.to_vec());
    let hidden = row.matmul(&adapter.w_down)?.relu();
    let out = hidden.matmul(&adapter.w_up)?;
    Ok(Tensor::from_parts(vec![out.numel()], out.into_data()))
}

/// Cosine between a token and a task signature.
pub fn relevance_scalar(p: &[f64], signature: &SignatureVector) -> Result<f64> {
    tensor::cosine("relevance_scalar", p, signature.tau.data())
}

/// Integrated adapter term for one token over `entries` (tasks in order).
/// An empty slice contributes zero.
pub fn integrate(p: &[f64], entries: &[BankEntry]) -> Result<Tensor> {
    let mut out = vec![0.0; p.len()];
    if entries.is_empty() {
        return Tensor::new([p.len()], out);
    }
    let mut scores = entries
        .iter()
        .map(|e| relevance_scalar(p, &e.signature))
        .collect::<Result<Vec<f64>>>()?;
    if entries.len() > 1 {
        tensor::softmax_in_place(&mut scores);
    }
    for (e, w) in entries.iter().zip(&scores) {
        let a = adapter_forward(p, &e.adapter)?;
        out.iter_mut().zip(a.data()).for_each(|(o, v)| *o += w * v);
    }
    Tensor::new([p.len()], out)
}

struct EntryVars {
    w_down: Var,
    w_up: Var,
    tau: Var,
}

/// Runs the adapters of a bank inside the backbone's forward pass.
pub struct BankHook {
    blocks: Vec<Vec<EntryVars>>,
    integration: Integration,
    evaluations: Vec<Vec<u64>>,
}

impl BankHook {
    /// Places the first `tasks` tasks of `bank` on the tape. Unfrozen entries
    /// become trainable leaves when `trainable` is set.
    pub fn bind(bank: &AdapterBank, tape: &mut Tape, tasks: usize, trainable: bool, integration: Integration) -> Self {
        let blocks: Vec<Vec<EntryVars>> = bank
            .blocks
            .iter()
            .map(|entries| {
                entries
                    .iter()
                    .take(tasks)
                    .map(|e| {
                        let mut put = |t: &Tensor| {
                            if trainable && !e.frozen {
                                tape.param(t.clone())
                            } else {
                                tape.constant(t.clone())
                            }
                        };
                        EntryVars {
                            w_down: put(&e.adapter.w_down),
                            w_up: put(&e.adapter.w_up),
                            tau: put(&e.signature.tau),
                        }
                    })
                    .collect()
            })
            .collect();
        let evaluations = blocks.iter().map(|b| vec![0; b.len()]).collect();
        Self {
            blocks,
            integration,
            evaluations,
        }
    }

    /// Trainable handles in the order of [`AdapterBank::trainable_mut`].
    pub fn trainable_vars(&self, tape: &Tape) -> Vec<Var> {
        self.blocks
            .iter()
            .flatten()
            .flat_map(|e| [e.w_down, e.w_up, e.tau])
            .filter(|&v| tape.requires_grad(v))
            .collect()
    }

    /// Substitutes caller-owned tape values `[w_down, w_up, tau]` for one
    /// entry, so gradients can be taken with respect to leaves created
    /// elsewhere.
    pub fn replace_entry(&mut self, block: usize, task: usize, vars: [Var; 3]) -> Result<()> {
        let e = self
            .blocks
            .get_mut(block)
            .and_then(|b| b.get_mut(task))
            .ok_or_else(|| Error::usage(format!("no adapter for block {block}, task {task}")))?;
        [e.w_down, e.w_up, e.tau] = vars;
        Ok(())
    }

    /// Tokens processed by each adapter so far, indexed `[block][task]`.
    pub fn evaluations(&self) -> &[Vec<u64>] {
        &self.evaluations
    }
}

impl TokenHook for BankHook {
    fn apply(&mut self, tape: &mut Tape, block: usize, normed: Var) -> Result<Option<Var>> {
        let entries = &self.blocks[block];
        if entries.is_empty() {
            return Ok(None);
        }
        let tokens = tape.value(normed).rows() as u64;
        let mut outputs = Vec::with_capacity(entries.len());
        for (t, e) in entries.iter().enumerate() {
            let h = tape.matmul(normed, e.w_down)?;
            let h = tape.relu(h)?;
            outputs.push(tape.matmul(h, e.w_up)?);
            self.evaluations[block][t] += tokens;
        }
        let mut terms = outputs.clone();
        if self.integration == Integration::Routed {
            let d = tape.value(normed).cols();
            let taus = entries
                .iter()
                .map(|e| tape.reshape(e.tau, [1, d]))
                .collect::<Result<Vec<Var>>>()?;
            let taus = tape.concat_rows(&taus)?;
            let taus = tape.l2_normalize(taus)?;
            let taus = tape.transpose(taus)?;
            let unit = tape.l2_normalize(normed)?;
            let scores = tape.matmul(unit, taus)?;
            let weights = if entries.len() == 1 { scores } else { tape.softmax(scores)? };
            for (i, term) in terms.iter_mut().enumerate() {
                let w = tape.slice_cols(weights, i, i + 1)?;
                *term = tape.mul_column(outputs[i], w)?;
            }
        }
        let mut sum = terms[0];
        for &t in &terms[1..] {
            sum = tape.add(sum, t)?;
        }
        Ok(Some(sum))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, random_tensor, weighted_sum};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_bank(seed: u64, tasks: usize, d: usize, r: usize) -> AdapterBank {
        let mut g = rng(seed);
        let mut bank = AdapterBank::new(1, d, r).unwrap();
        for t in 0..tasks {
            bank.add_task(t, &mut g).unwrap();
            let e = bank.blocks[0].last_mut().unwrap();
            e.adapter.w_up = random_tensor(&mut g, &[r, d]);
        }
        bank
    }

    fn hook_output(bank: &AdapterBank, tokens: &Tensor, integration: Integration) -> Tensor {
        let mut tape = Tape::new();
        let mut hook = BankHook::bind(bank, &mut tape, bank.task_count(), false, integration);
        let x = tape.constant(tokens.clone());
        let out = hook.apply(&mut tape, 0, x).unwrap().unwrap();
        tape.value(out).clone()
    }

    #[test]
    fn adapter_forward_cases() {
        let mut g = rng(1);
        let zero = TaskAdapter {
            block: 0,
            task: 0,
            w_down: Tensor::zeros([4, 2]),
            w_up: random_tensor(&mut g, &[2, 4]),
        };
        let p = random_tensor(&mut g, &[4]);
        assert!(adapter_forward(p.data(), &zero).unwrap().data().iter().all(|&v| v == 0.0));

        // p W_down <= 0 everywhere
        let neg = TaskAdapter {
            w_down: Tensor::new([2, 2], vec![-1.0, -2.0, -0.5, -1.0]).unwrap(),
            w_up: Tensor::new([2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
            ..zero.clone()
        };
        assert_eq!(adapter_forward(&[1.0, 2.0], &neg).unwrap().data(), &[0.0, 0.0]);

        let a = TaskAdapter {
            w_down: random_tensor(&mut g, &[4, 2]),
            w_up: random_tensor(&mut g, &[2, 4]),
            ..zero
        };
        let got = adapter_forward(p.data(), &a).unwrap();
        let mut hidden = [0.0; 2];
        for (k, h) in hidden.iter_mut().enumerate() {
            for i in 0..4 {
                *h += p.data()[i] * a.w_down.row(i)[k];
            }
            *h = h.max(0.0);
        }
        for j in 0..4 {
            let want: f64 = (0..2).map(|k| hidden[k] * a.w_up.row(k)[j]).sum();
            assert!((got.data()[j] - want).abs() < 1e-14);
        }
        assert!(adapter_forward(&[1.0; 3], &a).is_err());
    }

    #[test]
    fn relevance_cases() {
        let sig = |tau: Vec<f64>| SignatureVector {
            block: 0,
            task: 0,
            tau: Tensor::new([tau.len()], tau).unwrap(),
        };
        assert!((relevance_scalar(&[2.0, 4.0], &sig(vec![1.0, 2.0])).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(relevance_scalar(&[1.0, 0.0], &sig(vec![0.0, 3.0])).unwrap(), 0.0);
        let got = relevance_scalar(&[1.0, 0.0], &sig(vec![1.0, 1.0])).unwrap();
        assert!((got - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        assert!(matches!(
            relevance_scalar(&[0.0, 0.0], &sig(vec![1.0, 1.0])),
            Err(Error::DegenerateInput { .. })
        ));
        let s1 = relevance_scalar(&[0.3, -1.2], &sig(vec![0.7, 0.1])).unwrap();
        let s2 = relevance_scalar(&[3.0, -12.0], &sig(vec![0.7, 0.1])).unwrap();
        assert!((s1 - s2).abs() < 1e-15);
    }

    #[test]
    fn single_task_orthogonal_signature_contributes_nothing() {
        let mut bank = random_bank(2, 1, 2, 1);
        bank.blocks[0][0].signature.tau = Tensor::new([2], vec![0.0, 1.0]).unwrap();
        let out = integrate(&[3.0, 0.0], bank.entries(0)).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identical_adapters_integrate_to_that_adapter() {
        let mut bank = random_bank(3, 2, 6, 2);
        let first = bank.blocks[0][0].adapter.clone();
        bank.blocks[0][1].adapter.w_down = first.w_down.clone();
        bank.blocks[0][1].adapter.w_up = first.w_up.clone();
        let p = random_tensor(&mut rng(4), &[6]);
        let got = integrate(p.data(), bank.entries(0)).unwrap();
        let want = adapter_forward(p.data(), &first).unwrap();
        assert!(got.max_abs_diff(&want) < 1e-14);
    }

    #[test]
    fn three_tasks_match_brute_force_oracle() {
        let bank = random_bank(5, 3, 8, 3);
        let p = random_tensor(&mut rng(6), &[8]);
        let cos = |a: &[f64], b: &[f64]| {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            dot / (na * nb)
        };
        let scores: Vec<f64> = bank.entries(0).iter().map(|e| cos(p.data(), e.signature.tau.data())).collect();
        let z: f64 = scores.iter().map(|s| s.exp()).sum();
        let mut want = [0.0; 8];
        for (e, s) in bank.entries(0).iter().zip(&scores) {
            let a = adapter_forward(p.data(), &e.adapter).unwrap();
            for j in 0..8 {
                want[j] += s.exp() / z * a.data()[j];
            }
        }
        let got = integrate(p.data(), bank.entries(0)).unwrap();
        for j in 0..8 {
            assert!((got.data()[j] - want[j]).abs() < 1e-14);
        }
        // convexity: each coordinate lies between the extreme adapter outputs
        let outs: Vec<Tensor> = bank.entries(0).iter().map(|e| adapter_forward(p.data(), &e.adapter).unwrap()).collect();
        for j in 0..8 {
            let lo = outs.iter().map(|o| o.data()[j]).fold(f64::INFINITY, f64::min);
            let hi = outs.iter().map(|o| o.data()[j]).fold(f64::NEG_INFINITY, f64::max);
            assert!(got.data()[j] >= lo - 1e-14 && got.data()[j] <= hi + 1e-14);
        }
    }

    #[test]
    fn empty_bank_contributes_zero() {
        let bank = AdapterBank::new(1, 4, 2).unwrap();
        assert!(integrate(&[1.0, 2.0, 3.0, 4.0], bank.entries(0)).unwrap().data().iter().all(|&v| v == 0.0));
        let mut tape = Tape::new();
        let mut hook = BankHook::bind(&bank, &mut tape, 0, false, Integration::Routed);
        let x = tape.constant(Tensor::filled([3, 4], 1.0));
        assert!(hook.apply(&mut tape, 0, x).unwrap().is_none());
    }

    #[test]
    fn batched_hook_matches_per_token_integration() {
        for tasks in 1..=3 {
            let bank = random_bank(7 + tasks as u64, tasks, 6, 2);
            let tokens = random_tensor(&mut rng(8), &[5, 6]);
            let out = hook_output(&bank, &tokens, Integration::Routed);
            for i in 0..5 {
                let want = integrate(tokens.row(i), bank.entries(0)).unwrap();
                for j in 0..6 {
                    assert!((out.row(i)[j] - want.data()[j]).abs() < 1e-13);
                }
            }
            let plain = hook_output(&bank, &tokens, Integration::Unrouted);
            for i in 0..5 {
                let mut want = vec![0.0; 6];
                for e in bank.entries(0) {
                    let a = adapter_forward(tokens.row(i), &e.adapter).unwrap();
                    want.iter_mut().zip(a.data()).for_each(|(w, v)| *w += v);
                }
                for j in 0..6 {
                    assert!((plain.row(i)[j] - want[j]).abs() < 1e-13);
                }
            }
        }
    }

    #[test]
    fn add_task_order_freezing_and_duplicates() {
        let mut g = rng(9);
        let mut bank = AdapterBank::new(2, 8, 2).unwrap();
        bank.add_task(0, &mut g).unwrap();
        assert_eq!(bank.task_count(), 1);
        assert!(bank.entries(1)[0].adapter.w_up.data().iter().all(|&v| v == 0.0));
        bank.add_task(1, &mut g).unwrap();
        bank.add_task(2, &mut g).unwrap();
        assert!(matches!(bank.add_task(1, &mut g), Err(Error::Usage(_))));
        assert!(bank.add_task(5, &mut g).is_err());
        for b in 0..2 {
            let tasks: Vec<usize> = bank.entries(b).iter().map(|e| e.adapter.task).collect();
            assert_eq!(tasks, vec![0, 1, 2]);
            let frozen: Vec<bool> = bank.entries(b).iter().map(|e| e.frozen).collect();
            assert_eq!(frozen, vec![true, true, false]);
        }
        assert_eq!(bank.trainable_mut().len(), 6);
        assert!(AdapterBank::new(1, 4, 4).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut bank = random_bank(10, 3, 6, 2);
        bank.blocks[0][2].frozen = false;
        let back = AdapterBank::from_checkpoint(&bank.to_checkpoint().unwrap()).unwrap();
        assert_eq!(back, bank);
        assert_eq!(bank.truncated(2).task_count(), 2);
    }

    #[test]
    fn hook_gradients_match_finite_differences() {
        for tasks in [1usize, 3] {
            let bank = random_bank(11, tasks, 5, 2);
            let mut g = rng(12);
            let tokens = random_tensor(&mut g, &[4, 5]);
            let last = &bank.entries(0)[tasks - 1];
            let inputs = vec![
                tokens,
                last.adapter.w_down.clone(),
                last.adapter.w_up.clone(),
                last.signature.tau.clone(),
            ];
            check_gradients(
                "bank hook",
                &inputs,
                |t, v| {
                    let mut hook = BankHook::bind(&bank, t, tasks, false, Integration::Routed);
                    let e = hook.blocks[0].last_mut().unwrap();
                    e.w_down = v[1];
                    e.w_up = v[2];
                    e.tau = v[3];
                    let out = hook.apply(t, 0, v[0])?.unwrap();
                    weighted_sum(t, out)
                },
                1e-4,
            )
            .unwrap();
        }
    }
}
