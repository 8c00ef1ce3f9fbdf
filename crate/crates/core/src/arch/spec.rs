use std::fmt;

use crate::error::{Error, Result};
use crate::kv;

/// Compression factor θ held as an exact decimal fraction, so `floor(θ·c)` is exact.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Compression {
    num: u64,
    den: u64,
}

impl Compression {
    pub const ONE: Compression = Compression { num: 1, den: 1 };

    pub fn parse_decimal(text: &str) -> Option<Compression> {
        let (int, frac) = text.split_once('.').unwrap_or((text, ""));
        if int.is_empty() || !int.bytes().all(|b| b.is_ascii_digit()) || !frac.bytes().all(|b| b.is_ascii_digit()) {
            return None;
        }
        if text.contains('.') && frac.is_empty() || frac.len() > 9 {
            return None;
        }
        let den = 10u64.pow(frac.len() as u32);
        let num = int.parse::<u64>().ok()?.checked_mul(den)? + if frac.is_empty() { 0 } else { frac.parse::<u64>().ok()? };
        let g = gcd(num.max(1), den);
        Some(Compression { num: num / g, den: den / g })
    }

    pub fn apply(self, channels: usize) -> usize {
        (channels as u64 * self.num / self.den) as usize
    }

    pub fn value(self) -> f64 {
        self.num as f64 / self.den as f64
    }

    fn is_valid(self) -> bool {
        self.num > 0 && self.num <= self.den
    }
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

impl fmt::Display for Compression {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.value())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PredictionStyle {
    Plain,
    Dense,
}

impl std::str::FromStr for PredictionStyle {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(PredictionStyle::Plain),
            "dense" => Ok(PredictionStyle::Dense),
            other => Err(Error::config(format!("prediction style must be plain or dense, got `{other}`"))),
        }
    }
}

impl fmt::Display for PredictionStyle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PredictionStyle::Plain => "plain",
            PredictionStyle::Dense => "dense",
        })
    }
}

/// A complete `DS/A-B-k-θ` detector configuration.
///
/// `scale_channels[i]` is the width of prediction scale `i + 2`; scale 1 is the backbone tap.
#[derive(Clone, Debug, PartialEq)]
pub struct ArchSpec {
    pub first_conv_channels: usize,
    pub bottleneck_channels: usize,
    pub growth_rate: usize,
    pub compression: Compression,
    pub block_layers: Vec<usize>,
    pub use_stem: bool,
    pub use_transition_wo_pooling: bool,
    pub prediction_style: PredictionStyle,
    pub num_scales: usize,
    pub scale_channels: Vec<usize>,
    pub num_classes: usize,
    pub anchors_per_scale: Vec<usize>,
    pub input_size: usize,
}

pub const MAX_ANCHORS: usize = 6;

/// 512 for scales 2 and 3, 256 beyond.
pub fn default_scale_channels(num_scales: usize) -> Vec<usize> {
    (2..=num_scales).map(|s| if s <= 3 { 512 } else { 256 }).collect()
}

/// Four boxes on the first scale and the last two, six elsewhere.
pub fn default_anchors(num_scales: usize) -> Vec<usize> {
    (1..=num_scales).map(|s| if s == 1 || s + 2 > num_scales { 4 } else { 6 }).collect()
}

impl Default for ArchSpec {
    fn default() -> Self {
        ArchSpec {
            first_conv_channels: 64,
            bottleneck_channels: 192,
            growth_rate: 48,
            compression: Compression::ONE,
            block_layers: vec![6, 8, 8, 8],
            use_stem: true,
            use_transition_wo_pooling: true,
            prediction_style: PredictionStyle::Dense,
            num_scales: 6,
            scale_channels: default_scale_channels(6),
            num_classes: 21,
            anchors_per_scale: default_anchors(6),
            input_size: 300,
        }
    }
}

/// Parses `DS/<A>-<B>-<k>-<θ>`; positions in errors are byte offsets into `text`.
pub fn parse_arch_string(text: &str) -> Result<(usize, usize, usize, Compression)> {
    let err = |pos: usize, msg: &str| Error::Parse { pos, msg: format!("{msg} in `{text}`") };
    let body = text.strip_prefix("DS/").ok_or_else(|| err(0, "expected prefix `DS/`"))?;
    let mut pos = 3;
    let mut fields = Vec::new();
    for (i, part) in body.split('-').enumerate() {
        if i == 4 {
            return Err(err(pos - 1, "too many fields"));
        }
        if part.is_empty() {
            return Err(err(pos, "empty field"));
        }
        fields.push((pos, part));
        pos += part.len() + 1;
    }
    if fields.len() < 4 {
        return Err(err(text.len(), "expected four `-` separated fields"));
    }
    let int = |&(p, s): &(usize, &str), name: &str| -> Result<usize> {
        match s.bytes().position(|b| !b.is_ascii_digit()) {
            Some(off) => Err(err(p + off, &format!("{name} must be an integer"))),
            None => s.parse().map_err(|_| err(p, &format!("{name} out of range"))),
        }
    };
    let a = int(&fields[0], "A")?;
    let b = int(&fields[1], "B")?;
    let k = int(&fields[2], "k")?;
    let (tp, ts) = fields[3];
    let theta = Compression::parse_decimal(ts).ok_or_else(|| err(tp, "θ must be a decimal"))?;
    Ok((a, b, k, theta))
}

impl ArchSpec {
    pub fn from_arch_string(text: &str) -> Result<Self> {
        let mut spec = ArchSpec::default();
        spec.set_arch_string(text)?;
        Ok(spec)
    }

    pub fn set_arch_string(&mut self, text: &str) -> Result<()> {
        let (a, b, k, theta) = parse_arch_string(text)?;
        self.first_conv_channels = a;
        self.bottleneck_channels = b;
        self.growth_rate = k;
        self.compression = theta;
        Ok(())
    }

    pub fn arch_string(&self) -> String {
        format!(
            "DS/{}-{}-{}-{}",
            self.first_conv_channels, self.bottleneck_channels, self.growth_rate, self.compression
        )
    }

    /// Changes the scale count and resets per-scale lists to their defaults.
    pub fn set_num_scales(&mut self, n: usize) {
        self.num_scales = n;
        self.scale_channels = default_scale_channels(n);
        self.anchors_per_scale = default_anchors(n);
    }

    /// One width for every scale, or one per scale `2..=num_scales`.
    pub fn set_scale_channels(&mut self, widths: &[usize]) -> Result<()> {
        self.scale_channels = match widths.len() {
            1 => vec![widths[0]; self.num_scales.saturating_sub(1)],
            n if n + 1 == self.num_scales => widths.to_vec(),
            n => {
                return Err(Error::config(format!(
                    "scale_channels has {n} entries; expected 1 or {} (one per scale after the first)",
                    self.num_scales.saturating_sub(1)
                )))
            }
        };
        Ok(())
    }

    /// Same as [`set_scale_channels`](Self::set_scale_channels) but for a per-scale anchor list.
    pub fn set_anchors(&mut self, anchors: &[usize]) -> Result<()> {
        self.anchors_per_scale = match anchors.len() {
            1 => vec![anchors[0]; self.num_scales],
            n if n == self.num_scales => anchors.to_vec(),
            n => return Err(Error::config(format!("anchors has {n} entries; expected 1 or {}", self.num_scales))),
        };
        Ok(())
    }

    /// Applies one config entry; `Ok(false)` means the key is not an architecture key.
    ///
    /// `num_scales` resets the per-scale lists, so configs should set it before them.
    pub fn apply_entry(&mut self, e: &kv::Entry) -> Result<bool> {
        match e.key.as_str() {
            "arch" => self.set_arch_string(&e.value)?,
            "first_conv_channels" => self.first_conv_channels = e.parse_value()?,
            "bottleneck_channels" => self.bottleneck_channels = e.parse_value()?,
            "growth_rate" => self.growth_rate = e.parse_value()?,
            "compression" => {
                self.compression = Compression::parse_decimal(&e.value).ok_or_else(|| e.error("expected a decimal"))?
            }
            "block_layers" => self.block_layers = e.parse_list()?,
            "use_stem" => self.use_stem = e.parse_bool()?,
            "use_transition_wo_pooling" => self.use_transition_wo_pooling = e.parse_bool()?,
            "prediction_style" => self.prediction_style = e.value.parse()?,
            "num_scales" => self.set_num_scales(e.parse_value()?),
            "scale_channels" => self.set_scale_channels(&e.parse_list::<usize>()?)?,
            "num_classes" => self.num_classes = e.parse_value()?,
            "anchors_per_scale" => self.set_anchors(&e.parse_list::<usize>()?)?,
            "input_size" => self.input_size = e.parse_value()?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Parses a config holding only architecture keys.
    pub fn from_config_text(text: &str) -> Result<Self> {
        let mut spec = ArchSpec::default();
        for e in kv::parse(text)? {
            if !spec.apply_entry(&e)? {
                return Err(e.error("unknown key"));
            }
        }
        spec.validate()?;
        Ok(spec)
    }

    /// Serializes every field; parsing the result reproduces `self`.
    pub fn to_config_text(&self) -> String {
        let join = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        format!(
            "arch = {}\nblock_layers = {}\nuse_stem = {}\nuse_transition_wo_pooling = {}\nprediction_style = {}\n\
             num_scales = {}\nscale_channels = {}\nnum_classes = {}\nanchors_per_scale = {}\ninput_size = {}\n",
            self.arch_string(),
            join(&self.block_layers),
            self.use_stem,
            self.use_transition_wo_pooling,
            self.prediction_style,
            self.num_scales,
            join(&self.scale_channels),
            self.num_classes,
            join(&self.anchors_per_scale),
            self.input_size,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::config(m));
        if !self.compression.is_valid() {
            return fail(format!("compression θ = {} outside (0, 1]", self.compression));
        }
        if self.first_conv_channels == 0 {
            return fail("A must be at least 1".into());
        }
        if self.growth_rate == 0 {
            return fail("growth rate k must be at least 1".into());
        }
        if self.bottleneck_channels == 0 {
            return fail("bottleneck B must be at least 1".into());
        }
        let n = self.block_layers.len();
        if self.block_layers.contains(&0) {
            return fail("every dense block needs at least one layer".into());
        }
        if self.use_transition_wo_pooling && n < 4 {
            return fail(format!("{n} dense blocks; transition w/o pooling layers need at least 4"));
        }
        if !self.use_transition_wo_pooling && n != 3 {
            return fail(format!("{n} dense blocks; without transition w/o pooling exactly 3 are supported"));
        }
        if self.num_scales < 2 {
            return fail(format!("num_scales = {} (at least 2 required)", self.num_scales));
        }
        if self.scale_channels.len() + 1 != self.num_scales {
            return fail(format!("{} scale widths for {} scales", self.scale_channels.len(), self.num_scales));
        }
        if let Some(&w) = self.scale_channels.iter().find(|&&w| w < 2) {
            return fail(format!("scale width {w} too small"));
        }
        if self.prediction_style == PredictionStyle::Dense {
            if let Some(&w) = self.scale_channels.iter().find(|&&w| w % 2 == 1) {
                return fail(format!("dense prediction needs even scale widths, got {w}"));
            }
        }
        if self.anchors_per_scale.len() != self.num_scales {
            return fail(format!("{} anchor counts for {} scales", self.anchors_per_scale.len(), self.num_scales));
        }
        if let Some(&a) = self.anchors_per_scale.iter().find(|&&a| a == 0 || a > MAX_ANCHORS) {
            return fail(format!("anchor count {a} outside 1..={MAX_ANCHORS}"));
        }
        if self.num_classes < 2 {
            return fail("num_classes counts background and must be at least 2".into());
        }
        if self.input_size < 16 {
            return fail(format!("input size {} too small", self.input_size));
        }
        Ok(())
    }

    /// The small desk-scale configuration used for synthetic training.
    pub fn tiny(num_classes: usize) -> Self {
        ArchSpec {
            first_conv_channels: 8,
            bottleneck_channels: 16,
            growth_rate: 4,
            compression: Compression::ONE,
            block_layers: vec![2, 2, 2, 2],
            use_stem: true,
            use_transition_wo_pooling: true,
            prediction_style: PredictionStyle::Dense,
            num_scales: 4,
            scale_channels: vec![16; 3],
            num_classes,
            anchors_per_scale: default_anchors(4),
            input_size: 128,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arch_strings() {
        let (a, b, k, t) = parse_arch_string("DS/64-192-48-1").unwrap();
        assert_eq!((a, b, k, t), (64, 192, 48, Compression::ONE));
        let (a, b, k, t) = parse_arch_string("DS/32-12-16-0.5").unwrap();
        assert_eq!((a, b, k), (32, 12, 16));
        assert_eq!(t.apply(416), 208);
        assert_eq!(t.to_string(), "0.5");
    }

    #[test]
    fn arch_string_errors_carry_positions() {
        let pos = |s: &str| match parse_arch_string(s) {
            Err(Error::Parse { pos, .. }) => pos,
            other => panic!("{s}: {other:?}"),
        };
        assert_eq!(pos("DS/64--48-1"), 6);
        assert_eq!(pos("XS/64-1-1-1"), 0);
        assert_eq!(pos("DS/64-1x-1-1"), 7);
        assert_eq!(pos("DS/64-12-16"), 11);
        assert_eq!(pos("DS/1-1-1-1-1"), 10);
        assert_eq!(pos("DS/1-1-1-.5"), 9);
    }

    #[test]
    fn defaults() {
        assert_eq!(default_anchors(6), vec![4, 6, 6, 6, 4, 4]);
        assert_eq!(default_anchors(4), vec![4, 6, 4, 4]);
        assert_eq!(default_scale_channels(6), vec![512, 512, 256, 256, 256]);
        ArchSpec::default().validate().unwrap();
        ArchSpec::tiny(4).validate().unwrap();
    }

    #[test]
    fn validation_failures() {
        let bad = |f: &dyn Fn(&mut ArchSpec)| {
            let mut s = ArchSpec::default();
            f(&mut s);
            assert!(matches!(s.validate(), Err(Error::Config(_))));
        };
        bad(&|s| s.compression = Compression::parse_decimal("1.5").unwrap());
        bad(&|s| s.compression = Compression::parse_decimal("0").unwrap());
        bad(&|s| s.bottleneck_channels = 0);
        bad(&|s| s.scale_channels[2] = 255);
        bad(&|s| s.num_scales = 1);
        bad(&|s| s.block_layers = vec![6, 8]);
        bad(&|s| s.anchors_per_scale = vec![4; 5]);
    }

    #[test]
    fn config_roundtrip() {
        let mut s = ArchSpec::from_arch_string("DS/32-12-16-0.5").unwrap();
        s.prediction_style = PredictionStyle::Plain;
        s.set_scale_channels(&[128]).unwrap();
        let back = ArchSpec::from_config_text(&s.to_config_text()).unwrap();
        assert_eq!(back, s);
        assert!(ArchSpec::from_config_text("colour = red").is_err());
    }
}
