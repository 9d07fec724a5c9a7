use crate::error::Result;
use crate::layers::{Group, ParamId, ParamSet};
use crate::numerics::{BatchStats, Real, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in normalization layers.
    Train,
    /// Running statistics, nothing recorded for update.
    Eval,
}

/// One forward pass: a tape plus the binding of parameters onto it.
///
/// Parameters are placed on the tape lazily the first time a layer asks for
/// them. Only groups listed as trainable become gradient-carrying leaves;
/// everything else is recorded as a constant so backward skips it.
pub struct Ctx<'a, T: Real> {
    pub tape: Tape<T>,
    pub params: &'a ParamSet<T>,
    pub mode: Mode,
    trainable: Vec<Group>,
    bound: Vec<Option<Var>>,
    stats: Vec<(ParamId, ParamId, BatchStats<T>)>,
}

impl<'a, T: Real> Ctx<'a, T> {
    pub fn new(params: &'a ParamSet<T>, mode: Mode, trainable: &[Group]) -> Self {
        Ctx {
            tape: Tape::new(),
            params,
            mode,
            trainable: trainable.to_vec(),
            bound: vec![None; params.len()],
            stats: Vec::new(),
        }
    }

    /// Continues recording on an existing tape.
    pub fn with_tape(tape: Tape<T>, params: &'a ParamSet<T>, mode: Mode, trainable: &[Group]) -> Self {
        let mut ctx = Self::new(params, mode, trainable);
        ctx.tape = tape;
        ctx
    }

    pub fn into_tape(self) -> Tape<T> {
        self.tape
    }

    /// Uses `v` wherever the layer code asks for parameter `id`.
    pub fn bind(&mut self, id: ParamId, v: Var) {
        self.bound[id.0] = Some(v);
    }

    /// A context where nothing requires a gradient.
    pub fn frozen(params: &'a ParamSet<T>, mode: Mode) -> Self {
        Self::new(params, mode, &[])
    }

    pub fn is_train(&self) -> bool {
        self.mode == Mode::Train
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let p = self.params.param(id);
        let trainable = self.trainable.contains(&p.group);
        let v = self.tape.leaf(&p.value, trainable);
        self.bound[id.0] = Some(v);
        v
    }

    pub(crate) fn record_stats(&mut self, mean: ParamId, var: ParamId, stats: BatchStats<T>) {
        self.stats.push((mean, var, stats));
    }

    /// Batch statistics gathered during this pass, keyed by the running-stat buffers.
    pub fn take_stats(&mut self) -> Vec<(ParamId, ParamId, BatchStats<T>)> {
        std::mem::take(&mut self.stats)
    }

    /// Gradients of `loss` with respect to every bound trainable parameter.
    pub fn param_grads(&self, loss: Var) -> Result<Vec<(ParamId, Vec<T>)>> {
        let mut grads = self.tape.backward(loss)?;
        Ok(self
            .bound
            .iter()
            .enumerate()
            .filter_map(|(i, b)| b.and_then(|v| grads.take(v)).map(|g| (ParamId(i), g)))
            .collect())
    }

    /// Runs backward and writes gradients into `target`'s tensors. Returns
    /// the number of parameters that received one.
    pub fn backward_into(&self, loss: Var, target: &mut ParamSet<T>) -> Result<usize> {
        let grads = self.param_grads(loss)?;
        let n = grads.len();
        target.set_grads(grads)?;
        Ok(n)
    }
}
