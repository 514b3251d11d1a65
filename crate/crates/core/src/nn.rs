//! Layer helpers shared by the text encoder, the generator and the
//! perceptual network.

use alloc::format;

use crate::autograd::{Conv2dSpec, Var};
use crate::error::Result;
use crate::lora::{effective_weight, AdapterRef};
use crate::params::{ParamGroup, ParamMap, Session};

/// Base parameters of one component plus the adapters attached to them.
#[derive(Clone, Copy)]
pub(crate) struct Binding<'a> {
    pub base: &'a ParamMap,
    pub group: ParamGroup,
    pub adapters: Option<AdapterRef<'a>>,
}

impl<'a> Binding<'a> {
    pub fn new(base: &'a ParamMap, group: ParamGroup, adapters: Option<AdapterRef<'a>>) -> Self {
        Self {
            base,
            group,
            adapters,
        }
    }

    pub fn linear(&self, s: &mut Session, x: Var, id: &str) -> Result<Var> {
        let w = effective_weight(s, self.group, self.base, id, self.adapters)?;
        let b = s.param_from(self.group, self.base, &format!("{id}.bias"))?;
        Ok(s.graph.linear(x, w, Some(b)))
    }

    pub fn conv(&self, s: &mut Session, x: Var, id: &str, spec: Conv2dSpec) -> Result<Var> {
        let w = effective_weight(s, self.group, self.base, id, self.adapters)?;
        let b = s.param_from(self.group, self.base, &format!("{id}.bias"))?;
        Ok(s.graph.conv2d(x, w, Some(b), spec))
    }

    pub fn layer_norm(&self, s: &mut Session, x: Var, id: &str) -> Result<Var> {
        let g = s.param_from(self.group, self.base, &format!("{id}.gamma"))?;
        let b = s.param_from(self.group, self.base, &format!("{id}.beta"))?;
        Ok(s.graph.layer_norm(x, g, b))
    }

    pub fn tensor(&self, s: &mut Session, id: &str) -> Result<Var> {
        s.param_from(self.group, self.base, &format!("{id}.weight"))
    }
}

pub(crate) const CONV3: Conv2dSpec = Conv2dSpec {
    kernel: 3,
    stride: 1,
    padding: 1,
};

pub(crate) const CONV3_DOWN: Conv2dSpec = Conv2dSpec {
    kernel: 3,
    stride: 2,
    padding: 1,
};

pub(crate) const CONV1: Conv2dSpec = Conv2dSpec {
    kernel: 1,
    stride: 1,
    padding: 0,
};
