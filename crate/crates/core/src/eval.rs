//! Per-tag PSNR/SSIM tables for restored vs degraded inputs.

use std::collections::BTreeMap;
use std::fmt;

use crate::data::Dataset;
use crate::degrade::DegradationKind;
use crate::error::{Error, Result};
use crate::metrics::{psnr, ssim};
use crate::network::Network;
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Scores {
    pub psnr: f64,
    pub ssim: f64,
}

impl Scores {
    pub fn of(pred: &Tensor<f64>, target: &Tensor<f64>) -> Result<Self> {
        Ok(Self { psnr: psnr(pred, target)?, ssim: ssim(pred, target)? })
    }

    fn mean(items: &[Scores]) -> Self {
        let n = items.len().max(1) as f64;
        Self { psnr: items.iter().map(|s| s.psnr).sum::<f64>() / n, ssim: items.iter().map(|s| s.ssim).sum::<f64>() / n }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleScores {
    pub name: String,
    pub kind: DegradationKind,
    pub restored: Scores,
    pub degraded: Scores,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TagRow {
    pub kind: DegradationKind,
    pub count: usize,
    pub restored: Scores,
    pub degraded: Scores,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub samples: Vec<SampleScores>,
    pub rows: Vec<TagRow>,
    /// Mean of the tag rows.
    pub average: Scores,
    pub average_degraded: Scores,
}

impl EvalReport {
    pub fn from_samples(samples: Vec<SampleScores>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Validation("cannot evaluate an empty dataset".into()));
        }
        let mut by_tag: BTreeMap<DegradationKind, (Vec<Scores>, Vec<Scores>)> = BTreeMap::new();
        for s in &samples {
            let e = by_tag.entry(s.kind).or_default();
            e.0.push(s.restored);
            e.1.push(s.degraded);
        }
        let rows: Vec<TagRow> = by_tag
            .into_iter()
            .map(|(kind, (r, d))| TagRow { kind, count: r.len(), restored: Scores::mean(&r), degraded: Scores::mean(&d) })
            .collect();
        let average = Scores::mean(&rows.iter().map(|r| r.restored).collect::<Vec<_>>());
        let average_degraded = Scores::mean(&rows.iter().map(|r| r.degraded).collect::<Vec<_>>());
        Ok(Self { samples, rows, average, average_degraded })
    }

    /// Tab-separated form of the table.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("tag\tcount\tpsnr\tssim\tinput_psnr\tinput_ssim\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\n",
                r.kind, r.count, r.restored.psnr, r.restored.ssim, r.degraded.psnr, r.degraded.ssim
            ));
        }
        let n: usize = self.rows.iter().map(|r| r.count).sum();
        s.push_str(&format!(
            "average\t{n}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\n",
            self.average.psnr, self.average.ssim, self.average_degraded.psnr, self.average_degraded.ssim
        ));
        s
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<10} {:>5} {:>9} {:>7} {:>11} {:>9}", "tag", "count", "PSNR", "SSIM", "input PSNR", "input SSIM")?;
        let line = |f: &mut fmt::Formatter<'_>, tag: &str, n: usize, r: Scores, d: Scores| {
            writeln!(f, "{tag:<10} {n:>5} {:>9.3} {:>7.4} {:>11.3} {:>9.4}", r.psnr, r.ssim, d.psnr, d.ssim)
        };
        for r in &self.rows {
            line(f, r.kind.as_str(), r.count, r.restored, r.degraded)?;
        }
        let n = self.rows.iter().map(|r| r.count).sum();
        line(f, "average", n, self.average, self.average_degraded)
    }
}

/// Restores every degraded image of `data` and scores it against its clean
/// partner.
pub fn evaluate(net: &Network, params: &ParamStore<f32>, data: &Dataset) -> Result<EvalReport> {
    let mut samples = Vec::with_capacity(data.len());
    for s in &data.samples {
        let (out, _) = net.restore(params, &s.sample.degraded)?;
        samples.push(SampleScores {
            name: s.name.clone(),
            kind: s.sample.kind,
            restored: Scores::of(&out.cast(), &s.sample.clean)?,
            degraded: Scores::of(&s.sample.degraded, &s.sample.clean)?,
        });
    }
    EvalReport::from_samples(samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(name: &str, kind: DegradationKind, p: f64, s: f64) -> SampleScores {
        SampleScores { name: name.into(), kind, restored: Scores { psnr: p, ssim: s }, degraded: Scores { psnr: p - 3.0, ssim: s / 2.0 } }
    }

    #[test]
    fn average_is_the_mean_of_tag_rows() {
        let r = EvalReport::from_samples(vec![
            row("a", DegradationKind::Rain, 30.0, 0.9),
            row("b", DegradationKind::Rain, 20.0, 0.7),
            row("c", DegradationKind::Snow, 40.0, 0.5),
        ])
        .unwrap();
        assert_eq!(r.rows.len(), 2);
        assert_eq!(r.rows[0].restored, Scores { psnr: 25.0, ssim: 0.8 });
        assert_eq!(r.average.psnr, 32.5);
        assert!((r.average.ssim - 0.65).abs() < 1e-15);
        assert_eq!(r.average_degraded.psnr, 29.5);
        assert!(r.to_tsv().lines().last().unwrap().starts_with("average\t3\t32.5"));
        assert!(r.to_string().contains("average"));
        assert!(EvalReport::from_samples(vec![]).is_err());
    }
}
