//! The 3-D U-Net volume encoder G_2: three stride-2 encoder levels (total
//! downsample x8), nearest-neighbor upsampling with skip concatenation on the
//! way back, and a plain output conv to the volume feature width.

use rand::Rng;

use super::{BoundParams, Conv, InstanceNorm, ParameterStore};
use crate::tensor::{Scalar, Tape, Var};

#[derive(Debug, Clone)]
pub struct Unet3d {
    enc: [(Conv, InstanceNorm); 4],
    dec: [(Conv, InstanceNorm); 3],
    out: Conv,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Unet3d {
    pub fn new(name: &str, in_channels: usize, base: usize, out_channels: usize) -> Self {
        let b = base;
        let mk = |n: &str, cin: usize, cout: usize, stride: usize| {
            (
                Conv::new(format!("{name}.{n}"), cin, cout, 3, stride),
                InstanceNorm::new(format!("{name}.{n}.norm"), cout),
            )
        };
        Unet3d {
            enc: [
                mk("enc0", in_channels, b, 1),
                mk("enc1", b, 2 * b, 2),
                mk("enc2", 2 * b, 4 * b, 2),
                mk("enc3", 4 * b, 8 * b, 2),
            ],
            dec: [
                mk("dec2", 8 * b + 4 * b, 4 * b, 1),
                mk("dec1", 4 * b + 2 * b, 2 * b, 1),
                mk("dec0", 2 * b + b, b, 1),
            ],
            out: Conv::new(format!("{name}.out"), b, out_channels, 3, 1),
            in_channels,
            out_channels,
        }
    }

    /// Every spatial dim must be divisible by this.
    pub const DOWNSAMPLE: usize = 8;

    pub fn init<F: Scalar, R: Rng>(&self, store: &mut ParameterStore<F>, rng: &mut R) {
        for (conv, norm) in &self.enc {
            conv.init3d(store, rng);
            norm.init(store);
        }
        for (conv, norm) in &self.dec {
            conv.init3d(store, rng);
            norm.init(store);
        }
        self.out.init3d(store, rng);
    }

    /// x: [N, C_in, D, H, W] -> [N, C_out, D, H, W].
    pub fn forward<F: Scalar>(&self, tape: &mut Tape<F>, bound: &BoundParams, x: Var) -> Var {
        let s = tape.shape(x);
        assert_eq!(s.len(), 5, "unet3d: expects [N, C, D, H, W]");
        assert_eq!(s[1], self.in_channels, "unet3d: channel mismatch");
        for (axis, &dim) in s[2..].iter().enumerate() {
            assert!(
                dim % Self::DOWNSAMPLE == 0,
                "unet3d: spatial axis {axis} = {dim} not divisible by {}",
                Self::DOWNSAMPLE
            );
        }

        let stage = |tape: &mut Tape<F>, (conv, norm): &(Conv, InstanceNorm), x: Var| {
            let h = conv.forward3d(tape, bound, x);
            let h = norm.forward(tape, bound, h);
            tape.relu(h)
        };

        let e0 = stage(tape, &self.enc[0], x);
        let e1 = stage(tape, &self.enc[1], e0);
        let e2 = stage(tape, &self.enc[2], e1);
        let e3 = stage(tape, &self.enc[3], e2);

        let u2 = tape.upsample2_nearest3d(e3);
        let c2 = tape.concat(&[u2, e2], 1);
        let d2 = stage(tape, &self.dec[0], c2);

        let u1 = tape.upsample2_nearest3d(d2);
        let c1 = tape.concat(&[u1, e1], 1);
        let d1 = stage(tape, &self.dec[1], c1);

        let u0 = tape.upsample2_nearest3d(d1);
        let c0 = tape.concat(&[u0, e0], 1);
        let d0 = stage(tape, &self.dec[2], c0);

        self.out.forward3d(tape, bound, d0)
    }
}
