//! The 2-D feature extractor G_1: three conv stages at strides 1, 2, 2 for a
//! total x4 downsample. The first two stages carry instance norm + ReLU, the
//! final stage is a plain conv so features stay signed.

use rand::Rng;

use super::{BoundParams, Conv, InstanceNorm, ParameterStore};
use crate::tensor::{Scalar, Tape, Var};

#[derive(Debug, Clone)]
pub struct FeatureExtractor2d {
    convs: [Conv; 3],
    norms: [InstanceNorm; 2],
    pub out_channels: usize,
}

impl FeatureExtractor2d {
    /// `stage_channels` are the three stage widths; the last is the feature
    /// dimension C_1.
    pub fn new(name: &str, stage_channels: [usize; 3]) -> Self {
        let [c0, c1, c2] = stage_channels;
        FeatureExtractor2d {
            convs: [
                Conv::new(format!("{name}.conv0"), 3, c0, 3, 1),
                Conv::new(format!("{name}.conv1"), c0, c1, 3, 2),
                Conv::new(format!("{name}.conv2"), c1, c2, 3, 2),
            ],
            norms: [
                InstanceNorm::new(format!("{name}.in0"), c0),
                InstanceNorm::new(format!("{name}.in1"), c1),
            ],
            out_channels: c2,
        }
    }

    pub fn init<F: Scalar, R: Rng>(&self, store: &mut ParameterStore<F>, rng: &mut R) {
        for conv in &self.convs {
            conv.init2d(store, rng);
        }
        for norm in &self.norms {
            norm.init(store);
        }
    }

    /// x: [N, 3, H, W] with H, W divisible by 4 -> [N, C_1, H/4, W/4].
    pub fn forward<F: Scalar>(&self, tape: &mut Tape<F>, bound: &BoundParams, x: Var) -> Var {
        let s = tape.shape(x);
        assert_eq!(s.len(), 4, "extractor: expects [N, 3, H, W]");
        assert!(
            s[2] % 4 == 0 && s[3] % 4 == 0,
            "extractor: H and W must be divisible by 4 (got {}x{})",
            s[2],
            s[3]
        );
        let mut h = x;
        for (i, conv) in self.convs.iter().enumerate() {
            h = conv.forward2d(tape, bound, h);
            if i < 2 {
                h = self.norms[i].forward(tape, bound, h);
                h = tape.relu(h);
            }
        }
        h
    }
}
