//! Loss-subset and converter-design ablation grid.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use super::{architecture_label, loss_label, train, LossKind, TrainConfig, TrainError, TrainOutcome};
use crate::converters::Architecture;
use crate::synthdata::DatasetBundle;

#[derive(Clone, Debug, PartialEq)]
pub struct AblationCell {
    pub name: String,
    pub losses: BTreeSet<LossKind>,
    pub l2h: Architecture,
    pub h2l: Architecture,
}

/// Every nonempty loss subset with the structured converters, then the full
/// objective with either converter replaced by a plain MLP.
pub fn ablation_cells() -> Vec<AblationCell> {
    use LossKind::*;
    let subsets: [&[LossKind]; 7] = [
        &[Ldr],
        &[Hdr],
        &[H2l],
        &[Ldr, Hdr],
        &[Ldr, H2l],
        &[Hdr, H2l],
        &[Ldr, Hdr, H2l],
    ];
    let aware = Architecture::ImagingAware;
    let mut cells: Vec<AblationCell> = subsets
        .iter()
        .map(|s| {
            let losses: BTreeSet<LossKind> = s.iter().copied().collect();
            AblationCell {
                name: loss_label(&losses),
                losses,
                l2h: aware,
                h2l: aware,
            }
        })
        .collect();
    let all: BTreeSet<LossKind> = [Ldr, Hdr, H2l].into_iter().collect();
    cells.push(AblationCell {
        name: "l2h-mlp".into(),
        losses: all.clone(),
        l2h: Architecture::PlainMlp,
        h2l: aware,
    });
    cells.push(AblationCell {
        name: "h2l-mlp".into(),
        losses: all,
        l2h: aware,
        h2l: Architecture::PlainMlp,
    });
    cells
}

impl AblationCell {
    pub fn config(&self, base: &TrainConfig, seed: u64) -> TrainConfig {
        let mut c = base.clone();
        c.losses = self.losses.clone();
        c.l2h = c.l2h.with_architecture(self.l2h);
        c.h2l = c.h2l.with_architecture(self.h2l);
        c.seed = seed;
        c
    }
}

/// One CSV row of the ablation report.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub cell: String,
    pub losses: String,
    pub l2h: &'static str,
    pub h2l: &'static str,
    pub seed: u64,
    /// `ok`, or `failed: <reason>`.
    pub status: String,
    pub psnr_ldr: Option<f64>,
    pub ssim_ldr: Option<f64>,
    pub psnr_hdr_mulaw: Option<f64>,
    pub ssim_hdr_mulaw: Option<f64>,
    pub final_loss: Option<f64>,
}

/// Runs every cell for every seed. `on_run` sees each finished run, for
/// example to write a per-cell directory. A failing cell is reported in its
/// row and does not stop the grid.
pub fn ablate(
    bundle: &DatasetBundle,
    base: &TrainConfig,
    cells: &[AblationCell],
    seeds: &[u64],
    mut on_run: impl FnMut(&AblationCell, u64, &Result<TrainOutcome, TrainError>),
) -> Vec<AblationRow> {
    let mut rows = Vec::new();
    for cell in cells {
        for &seed in seeds {
            let result = train(bundle, cell.config(base, seed));
            on_run(cell, seed, &result);
            let mut row = AblationRow {
                cell: cell.name.clone(),
                losses: loss_label(&cell.losses),
                l2h: architecture_label(cell.l2h),
                h2l: architecture_label(cell.h2l),
                seed,
                status: "ok".into(),
                psnr_ldr: None,
                ssim_ldr: None,
                psnr_hdr_mulaw: None,
                ssim_hdr_mulaw: None,
                final_loss: None,
            };
            match &result {
                Ok(out) => {
                    if let Some(e) = out.final_eval() {
                        row.psnr_ldr = e.psnr_ldr;
                        row.ssim_ldr = e.ssim_ldr;
                        row.psnr_hdr_mulaw = e.psnr_hdr_mulaw;
                        row.ssim_hdr_mulaw = e.ssim_hdr_mulaw;
                    }
                    row.final_loss = out.train_losses().last().copied();
                }
                Err(e) => row.status = format!("failed: {e}"),
            }
            rows.push(row);
        }
    }
    rows
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// Per-cell medians of the tonemapped HDR PSNR over successful seeds.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationSummary {
    pub median_hdr_psnr: BTreeMap<String, f64>,
}

impl AblationSummary {
    pub fn get(&self, cell: &str) -> Option<f64> {
        self.median_hdr_psnr.get(cell).copied()
    }
}

pub fn summarize_ablation(rows: &[AblationRow]) -> AblationSummary {
    let mut by_cell: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in rows {
        if let (true, Some(p)) = (r.status == "ok", r.psnr_hdr_mulaw) {
            by_cell.entry(r.cell.clone()).or_default().push(p);
        }
    }
    AblationSummary {
        median_hdr_psnr: by_cell
            .into_iter()
            .filter_map(|(k, v)| median(v).map(|m| (k, m)))
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_has_seven_subsets_and_two_swaps() {
        let cells = ablation_cells();
        assert_eq!(cells.len(), 9);
        let subsets: BTreeSet<_> = cells[..7].iter().map(|c| c.name.clone()).collect();
        assert_eq!(subsets.len(), 7);
        assert!(cells[..7].iter().all(|c| c.l2h == Architecture::ImagingAware));
        assert_eq!(cells[7].l2h, Architecture::PlainMlp);
        assert_eq!(cells[8].h2l, Architecture::PlainMlp);
    }

    #[test]
    fn medians_skip_failed_and_missing() {
        let row = |cell: &str, status: &str, p: Option<f64>| AblationRow {
            cell: cell.into(),
            losses: String::new(),
            l2h: "",
            h2l: "",
            seed: 0,
            status: status.into(),
            psnr_ldr: None,
            ssim_ldr: None,
            psnr_hdr_mulaw: p,
            ssim_hdr_mulaw: None,
            final_loss: None,
        };
        let rows = vec![
            row("a", "ok", Some(3.0)),
            row("a", "ok", Some(1.0)),
            row("a", "failed: x", Some(100.0)),
            row("a", "ok", Some(2.0)),
            row("b", "ok", None),
            row("c", "ok", Some(1.0)),
            row("c", "ok", Some(2.0)),
        ];
        let s = summarize_ablation(&rows);
        assert_eq!(s.get("a"), Some(2.0));
        assert_eq!(s.get("b"), None);
        assert_eq!(s.get("c"), Some(1.5));
    }
}
