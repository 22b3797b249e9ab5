//! Small convolutional source codec: stride-2 conv encoder and
//! nearest-neighbor-upsampling decoder.

use crate::error::{Error, Result};
use crate::numcore::{Binding, Dtype, Graph, ParamStore, Tensor, Var};
use crate::rng::RngStream;

fn init_conv_weight(
    cout: usize,
    cin: usize,
    k: usize,
    rng: &mut RngStream,
) -> Tensor {
    let fan_in = (cin * k * k) as f64;
    let bound = 1.0 / fan_in.sqrt();
    let data = (0..cout * cin * k * k)
        .map(|_| rng.range(-bound, bound))
        .collect();
    Tensor::from_real(&[cout, cin, k, k], data)
}

/// Number of stride-2 halvings to go from `full` to `reduced`.
fn levels_for(full: usize, reduced: usize) -> Result<usize> {
    if reduced == 0 || full % reduced != 0 {
        return Err(Error::config(
            "feature_size",
            format!("spatial size {full} not an integer multiple of {reduced}"),
        ));
    }
    let ratio = full / reduced;
    if ratio < 2 || !ratio.is_power_of_two() {
        return Err(Error::config(
            "feature_size",
            format!("spatial reduction {full}/{reduced} must be a power of two >= 2"),
        ));
    }
    Ok(ratio.trailing_zeros() as usize)
}

/// Stride-2 conv + ReLU blocks mapping [in_ch × H × W] down to
/// [d_s × H_s × W_s].
#[derive(Debug, Clone)]
pub struct ConvEncoder {
    pub prefix: String,
    pub in_ch: usize,
    pub channels: Vec<usize>,
    pub img: (usize, usize),
    pub feat: (usize, usize),
}

impl ConvEncoder {
    pub fn new(
        prefix: impl Into<String>,
        in_ch: usize,
        d_s: usize,
        img: (usize, usize),
        feat: (usize, usize),
    ) -> Result<Self> {
        let ly = levels_for(img.0, feat.0)?;
        let lx = levels_for(img.1, feat.1)?;
        if ly != lx {
            return Err(Error::config(
                "feature_size",
                format!("height and width reductions differ ({ly} vs {lx} halvings)"),
            ));
        }
        // Channel progression 8, 16, 32, ... ending at d_s.
        let mut channels: Vec<usize> = (0..ly).map(|i| 8usize << i).collect();
        if let Some(last) = channels.last_mut() {
            *last = d_s;
        }
        Ok(ConvEncoder {
            prefix: prefix.into(),
            in_ch,
            channels,
            img,
            feat,
        })
    }

    pub fn register(&self, store: &mut ParamStore, rng: &mut RngStream) {
        let mut cin = self.in_ch;
        for (i, &cout) in self.channels.iter().enumerate() {
            store.insert(
                format!("{}.conv{i}.w", self.prefix),
                init_conv_weight(cout, cin, 3, rng),
            );
            store.insert(
                format!("{}.conv{i}.b", self.prefix),
                Tensor::zeros(&[cout], Dtype::Real),
            );
            cin = cout;
        }
    }

    pub fn forward(&self, g: &mut Graph, bind: &Binding, img: Var) -> Result<Var> {
        let shape = g.value(img).shape.clone();
        if shape != [self.in_ch, self.img.0, self.img.1] {
            return Err(Error::shape(
                "conv_encode",
                format!(
                    "input {:?} vs configured [{}, {}, {}]",
                    shape, self.in_ch, self.img.0, self.img.1
                ),
            ));
        }
        let mut x = img;
        for i in 0..self.channels.len() {
            let w = bind.var(&format!("{}.conv{i}.w", self.prefix));
            let b = bind.var(&format!("{}.conv{i}.b", self.prefix));
            x = g.conv2d(x, w, b, 2, 1)?;
            x = g.relu(x)?;
        }
        Ok(x)
    }
}

/// Mirror of [`ConvEncoder`]: upsample + conv + ReLU blocks, with a final
/// stride-1 conv emitting per-class logits at full resolution.
#[derive(Debug, Clone)]
pub struct ConvDecoder {
    pub prefix: String,
    pub d_s: usize,
    pub classes: usize,
    pub channels: Vec<usize>,
    pub feat: (usize, usize),
    pub img: (usize, usize),
}

impl ConvDecoder {
    pub fn new(
        prefix: impl Into<String>,
        d_s: usize,
        classes: usize,
        img: (usize, usize),
        feat: (usize, usize),
    ) -> Result<Self> {
        let ly = levels_for(img.0, feat.0)?;
        let lx = levels_for(img.1, feat.1)?;
        if ly != lx {
            return Err(Error::config(
                "feature_size",
                format!("height and width reductions differ ({ly} vs {lx} halvings)"),
            ));
        }
        // Reverse of the encoder progression, without the class head; the
        // head conv supplies the final upsampling level.
        let channels: Vec<usize> = (0..ly - 1).rev().map(|i| 8usize << i).collect();
        Ok(ConvDecoder {
            prefix: prefix.into(),
            d_s,
            classes,
            channels,
            feat,
            img,
        })
    }

    pub fn register(&self, store: &mut ParamStore, rng: &mut RngStream) {
        let mut cin = self.d_s;
        for (i, &cout) in self.channels.iter().enumerate() {
            store.insert(
                format!("{}.conv{i}.w", self.prefix),
                init_conv_weight(cout, cin, 3, rng),
            );
            store.insert(
                format!("{}.conv{i}.b", self.prefix),
                Tensor::zeros(&[cout], Dtype::Real),
            );
            cin = cout;
        }
        store.insert(
            format!("{}.head.w", self.prefix),
            init_conv_weight(self.classes, cin, 3, rng),
        );
        store.insert(
            format!("{}.head.b", self.prefix),
            Tensor::zeros(&[self.classes], Dtype::Real),
        );
    }

    /// Feature [d_s × H_s × W_s] -> logits [C × H × W].
    pub fn forward(&self, g: &mut Graph, bind: &Binding, feat: Var) -> Result<Var> {
        let shape = g.value(feat).shape.clone();
        if shape != [self.d_s, self.feat.0, self.feat.1] {
            return Err(Error::shape(
                "conv_decode",
                format!(
                    "feature {:?} vs configured [{}, {}, {}]",
                    shape, self.d_s, self.feat.0, self.feat.1
                ),
            ));
        }
        let mut x = feat;
        for i in 0..self.channels.len() {
            x = g.upsample_nearest(x, 2)?;
            let w = bind.var(&format!("{}.conv{i}.w", self.prefix));
            let b = bind.var(&format!("{}.conv{i}.b", self.prefix));
            x = g.conv2d(x, w, b, 1, 1)?;
            x = g.relu(x)?;
        }
        x = g.upsample_nearest(x, 2)?;
        let w = bind.var(&format!("{}.head.w", self.prefix));
        let b = bind.var(&format!("{}.head.b", self.prefix));
        g.conv2d(x, w, b, 1, 1)
    }
}
