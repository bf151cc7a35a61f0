//! Coarse 2-D convolutional gating of a spectral plane.

use rand_chacha::ChaCha8Rng;

use crate::autograd::{Param, Tape, Var};
use crate::nn::{BatchNorm2d, Conv2d, ForwardCtx, Module, PRelu};
use crate::{Error, Result};

pub const KERNEL: usize = 3;

/// `x * sigmoid(down(prelu(bn(up(x)))))` on a `[B, F, T]` plane.
#[derive(Clone, Debug)]
pub struct Mp2dc {
    pub up: Conv2d,
    pub norm: BatchNorm2d,
    pub act: PRelu,
    pub down: Conv2d,
}

impl Mp2dc {
    pub fn new(name: &str, channels: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            up: Conv2d::new(&format!("{name}.up"), 1, channels, KERNEL, rng),
            norm: BatchNorm2d::new(&format!("{name}.norm"), channels),
            act: PRelu::new(&format!("{name}.act"), channels),
            down: Conv2d::new(&format!("{name}.down"), channels, 1, KERNEL, rng),
        }
    }

    pub fn channels(&self) -> usize {
        self.act.slope.value.len()
    }

    /// Gate values in (0, 1), shape `[B, F, T]`.
    pub fn gate<'t>(&self, tape: &'t Tape, plane: Var<'t>, ctx: &mut ForwardCtx) -> Result<Var<'t>> {
        let s = plane.shape();
        if s.len() != 3 {
            return Err(Error::input(format!("expected a [batch, freq, time] plane, got {s:?}")));
        }
        if s[1] < KERNEL || s[2] < KERNEL {
            return Err(Error::input(format!("plane {}x{} is smaller than the {KERNEL}x{KERNEL} kernel", s[1], s[2])));
        }
        let x = plane.unsqueeze(1);
        let h = self.up.forward(tape, x);
        let h = self.norm.forward(tape, h, ctx);
        let h = self.act.forward(tape, h);
        Ok(self.down.forward(tape, h).sigmoid().squeeze(1))
    }

    pub fn forward<'t>(&self, tape: &'t Tape, plane: Var<'t>, ctx: &mut ForwardCtx) -> Result<Var<'t>> {
        Ok(self.gate(tape, plane, ctx)? * plane)
    }
}

impl Module for Mp2dc {
    fn params(&self) -> Vec<&Param> {
        let mut v = self.up.params();
        v.extend(self.norm.params());
        v.extend(self.act.params());
        v.extend(self.down.params());
        v
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.up.params_mut();
        v.extend(self.norm.params_mut());
        v.extend(self.act.params_mut());
        v.extend(self.down.params_mut());
        v
    }
    fn buffers(&self) -> Vec<&Param> {
        self.norm.buffers()
    }
    fn buffers_mut(&mut self) -> Vec<&mut Param> {
        self.norm.buffers_mut()
    }
}
