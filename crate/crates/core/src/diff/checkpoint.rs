//! Rematerialized backpropagation through a chain of step functions.
//!
//! The forward pass runs untaped and keeps only the state between steps.
//! The backward pass replays one step at a time on a fresh tape, seeded with
//! the adjoint of that step's output, so the live tape never holds more than
//! one step's activations.

use super::{Real, Tape, Var};
use crate::error::Result;

/// A computation split into steps `state_{i+1} = step(i, params, state_i)`.
pub trait SegmentedMap {
    fn steps(&self) -> usize;

    /// Indices into the global parameter vector that step `i` reads, in the
    /// order `step` expects them.
    fn step_params(&self, step: usize) -> Vec<usize>;

    fn step<S: Real>(&self, step: usize, params: &[S], state: &[S]) -> Result<Vec<S>>;
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CheckpointStats {
    /// Number of states kept alive across steps.
    pub stored_states: usize,
    /// Largest number of tape nodes alive at once.
    pub peak_tape_nodes: usize,
    /// Largest |replayed - stored| over all replayed step outputs.
    pub max_replay_diff: f64,
}

#[derive(Debug, Clone)]
pub struct MapGrad {
    pub loss: f64,
    pub output: Vec<f64>,
    pub d_params: Vec<f64>,
    pub d_init: Vec<f64>,
    pub stats: CheckpointStats,
}

fn taped_loss<L>(output: &[f64], loss: &L) -> Result<(f64, Vec<f64>)>
where
    L: for<'t> Fn(&[Var<'t>]) -> Var<'t>,
{
    let tape = Tape::new();
    let out = tape.vars(output);
    let l = loss(&out);
    let adj = tape.backward(&[(l, 1.0)])?;
    Ok((l.value(), adj.wrt_all(&out)))
}

/// Gradient of `loss(map(params, init))` with per-step recomputation.
pub fn checkpointed_grad<M, L>(map: &M, params: &[f64], init: &[f64], loss: L) -> Result<MapGrad>
where
    M: SegmentedMap,
    L: for<'t> Fn(&[Var<'t>]) -> Var<'t>,
{
    let n = map.steps();
    let mut states: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
    states.push(init.to_vec());
    for i in 0..n {
        let p: Vec<f64> = map.step_params(i).iter().map(|&k| params[k]).collect();
        let next = map.step::<f64>(i, &p, &states[i])?;
        states.push(next);
    }

    let (loss_value, mut adj_state) = taped_loss(&states[n], &loss)?;
    let mut d_params = vec![0.0; params.len()];
    let mut stats = CheckpointStats {
        stored_states: states.len(),
        ..Default::default()
    };

    for i in (0..n).rev() {
        let tape = Tape::new();
        let idx = map.step_params(i);
        let p: Vec<f64> = idx.iter().map(|&k| params[k]).collect();
        let pv = tape.vars(&p);
        let sv = tape.vars(&states[i]);
        let out = map.step(i, &pv, &sv)?;
        for (o, s) in out.iter().zip(&states[i + 1]) {
            stats.max_replay_diff = stats.max_replay_diff.max((o.value() - s).abs());
        }
        stats.peak_tape_nodes = stats.peak_tape_nodes.max(tape.len());
        let seeds: Vec<(Var<'_>, f64)> = out.iter().copied().zip(adj_state.iter().copied()).collect();
        let adj = tape.backward(&seeds)?;
        for (k, v) in idx.iter().zip(&pv) {
            d_params[*k] += adj.wrt(v);
        }
        adj_state = adj.wrt_all(&sv);
    }

    Ok(MapGrad {
        loss: loss_value,
        output: states.pop().unwrap_or_default(),
        d_params,
        d_init: adj_state,
        stats,
    })
}

/// Same gradient computed by recording the whole chain on one tape.
pub fn whole_tape_grad<M, L>(map: &M, params: &[f64], init: &[f64], loss: L) -> Result<MapGrad>
where
    M: SegmentedMap,
    L: for<'t> Fn(&[Var<'t>]) -> Var<'t>,
{
    let tape = Tape::new();
    let pv = tape.vars(params);
    let x0 = tape.vars(init);
    let mut state = x0.clone();
    for i in 0..map.steps() {
        let p: Vec<Var<'_>> = map.step_params(i).iter().map(|&k| pv[k]).collect();
        state = map.step(i, &p, &state)?;
    }
    let l = loss(&state);
    let adj = tape.backward(&[(l, 1.0)])?;
    Ok(MapGrad {
        loss: l.value(),
        output: state.iter().map(|v| v.value()).collect(),
        d_params: adj.wrt_all(&pv),
        d_init: adj.wrt_all(&x0),
        stats: CheckpointStats {
            stored_states: map.steps() + 1,
            peak_tape_nodes: tape.len(),
            max_replay_diff: 0.0,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    /// x <- tanh(a_i * x) + b_i, elementwise.
    struct Chain {
        n: usize,
    }

    impl SegmentedMap for Chain {
        fn steps(&self) -> usize {
            self.n
        }
        fn step_params(&self, step: usize) -> Vec<usize> {
            vec![2 * step, 2 * step + 1]
        }
        fn step<S: Real>(&self, _: usize, p: &[S], x: &[S]) -> Result<Vec<S>> {
            let out: Vec<S> = x.iter().map(|&v| (p[0] * v).tanh() + p[1]).collect();
            if out.iter().any(|v| !v.value().is_finite()) {
                return Err(Error::Divergence { step: 0 });
            }
            Ok(out)
        }
    }

    fn sq<'t>(v: &[Var<'t>]) -> Var<'t> {
        Var::dot(v, v)
    }

    #[test]
    fn matches_whole_tape() {
        let map = Chain { n: 7 };
        let params: Vec<f64> = (0..14).map(|i| 0.3 + 0.1 * i as f64).collect();
        let init = [0.2, -0.5, 1.1];
        let a = checkpointed_grad(&map, &params, &init, sq).unwrap();
        let b = whole_tape_grad(&map, &params, &init, sq).unwrap();
        assert_eq!(a.loss, b.loss);
        assert_eq!(a.output, b.output);
        for (x, y) in a.d_params.iter().zip(&b.d_params) {
            assert!((x - y).abs() <= 1e-12);
        }
        for (x, y) in a.d_init.iter().zip(&b.d_init) {
            assert!((x - y).abs() <= 1e-12);
        }
        assert_eq!(a.stats.max_replay_diff, 0.0);
    }

    #[test]
    fn peak_memory_independent_of_length() {
        let init = [0.2, -0.5];
        let short = Chain { n: 3 };
        let long = Chain { n: 30 };
        let p: Vec<f64> = vec![0.5; 60];
        let a = checkpointed_grad(&short, &p[..6], &init, sq).unwrap();
        let b = checkpointed_grad(&long, &p, &init, sq).unwrap();
        assert_eq!(a.stats.peak_tape_nodes, b.stats.peak_tape_nodes);
        let w = whole_tape_grad(&long, &p, &init, sq).unwrap();
        assert!(w.stats.peak_tape_nodes > 10 * b.stats.peak_tape_nodes);
    }
}
