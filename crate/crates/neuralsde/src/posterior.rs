//! Chains of per-epoch posterior draws and their quantile bands.
//!
//! A [`Chain`] stores named scalar series (prices, implied volatilities, the
//! misfit, the log posterior) over a shared epoch axis. Bands are computed on
//! these derived quantities rather than on the raw parameter vector, per cell
//! of the quote surface, using order-statistic linear interpolation so the
//! results are reproducible across runs and platforms.

use std::fmt::Write as _;
use std::path::Path;

use crate::bayes::EpochRecord;
use crate::error::{Error, Result};

/// Name of one chain series, optionally tagged with the `(maturity, strike)`
/// cell it describes; only tagged series enter [`band`].
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesLabel {
    pub name: String,
    pub cell: Option<(f64, f64)>,
}

impl SeriesLabel {
    pub fn plain(name: impl Into<String>) -> Self {
        SeriesLabel {
            name: name.into(),
            cell: None,
        }
    }

    pub fn cell(name: impl Into<String>, maturity: f64, strike: f64) -> Self {
        SeriesLabel {
            name: name.into(),
            cell: Some((maturity, strike)),
        }
    }
}

/// Ordered per-epoch records of named scalar series sharing one epoch axis.
#[derive(Debug, Clone, PartialEq)]
pub struct Chain {
    labels: Vec<SeriesLabel>,
    epochs: Vec<u64>,
    columns: Vec<Vec<f64>>,
}

impl Chain {
    pub fn new(labels: Vec<SeriesLabel>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Empty {
                what: "chain series labels".to_string(),
            });
        }
        for (i, label) in labels.iter().enumerate() {
            if label.name.is_empty() || label.name.contains(',') || label.name.contains('\n') {
                return Err(Error::Config(format!(
                    "series name {:?} is empty or contains a separator",
                    label.name
                )));
            }
            if labels[..i].iter().any(|l| l.name == label.name) {
                return Err(Error::Config(format!(
                    "duplicate series name {:?}",
                    label.name
                )));
            }
        }
        let columns = vec![Vec::new(); labels.len()];
        Ok(Chain {
            labels,
            epochs: Vec::new(),
            columns,
        })
    }

    /// Chain over the calibration trace: `log_post`, `G`, then one price
    /// series per quote tagged with that quote's `(maturity, strike)`.
    pub fn from_records(records: &[EpochRecord], cells: &[(f64, f64)]) -> Result<Self> {
        let mut labels = vec![SeriesLabel::plain("log_post"), SeriesLabel::plain("G")];
        for (i, &(maturity, strike)) in cells.iter().enumerate() {
            labels.push(SeriesLabel::cell(format!("price_{}", i + 1), maturity, strike));
        }
        let mut chain = Chain::new(labels)?;
        let mut row = Vec::with_capacity(2 + cells.len());
        for r in records {
            if r.prices.len() != cells.len() {
                return Err(Error::ShapeMismatch {
                    op: "Chain::from_records",
                    lhs: vec![cells.len()],
                    rhs: vec![r.prices.len()],
                });
            }
            row.clear();
            row.push(r.log_post);
            row.push(r.misfit);
            row.extend_from_slice(&r.prices);
            chain.push(r.epoch, &row)?;
        }
        Ok(chain)
    }

    /// Appends one epoch's values, in label order.
    pub fn push(&mut self, epoch: u64, row: &[f64]) -> Result<()> {
        if row.len() != self.labels.len() {
            return Err(Error::ShapeMismatch {
                op: "Chain::push",
                lhs: vec![self.labels.len()],
                rhs: vec![row.len()],
            });
        }
        self.epochs.push(epoch);
        for (col, &value) in self.columns.iter_mut().zip(row) {
            col.push(value);
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    pub fn labels(&self) -> &[SeriesLabel] {
        &self.labels
    }

    pub fn epochs(&self) -> &[u64] {
        &self.epochs
    }

    pub fn series(&self, name: &str) -> Option<&[f64]> {
        self.labels
            .iter()
            .position(|l| l.name == name)
            .map(|i| self.columns[i].as_slice())
    }

    /// Attaches `(maturity, strike)` tags to the `price_*` series, in column
    /// order. [`trace_csv`] does not serialize cell tags, so a chain read back
    /// from disk needs them restored before [`band`] can extract anything.
    pub fn with_cells(mut self, cells: &[(f64, f64)]) -> Result<Self> {
        let price_cols: Vec<usize> = self
            .labels
            .iter()
            .enumerate()
            .filter(|(_, l)| l.name.starts_with("price_"))
            .map(|(i, _)| i)
            .collect();
        if price_cols.len() != cells.len() {
            return Err(Error::ShapeMismatch {
                op: "Chain::with_cells",
                lhs: vec![price_cols.len()],
                rhs: vec![cells.len()],
            });
        }
        for (&i, &(maturity, strike)) in price_cols.iter().zip(cells) {
            self.labels[i].cell = Some((maturity, strike));
        }
        Ok(self)
    }
}

/// Quantile of a series by linear interpolation between order statistics at
/// the 1-based index `h = (n - 1) q + 1`; `q = 0` and `q = 1` give the exact
/// minimum and maximum.
pub fn quantile(series: &[f64], q: f64) -> Result<f64> {
    if series.is_empty() {
        return Err(Error::Empty {
            what: "quantile series".to_string(),
        });
    }
    if !q.is_finite() || !(0.0..=1.0).contains(&q) {
        return Err(Error::Config(format!(
            "quantile level {q} outside [0, 1]"
        )));
    }
    let mut sorted = series.to_vec();
    sorted.sort_by(f64::total_cmp);
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let frac = h - lo as f64;
    if frac == 0.0 || lo + 1 == sorted.len() {
        Ok(sorted[lo])
    } else {
        Ok(sorted[lo] + frac * (sorted[lo + 1] - sorted[lo]))
    }
}

/// One quote cell's band: quantiles of its post-burn-in draws.
#[derive(Debug, Clone, PartialEq)]
pub struct BandCell {
    pub maturity: f64,
    pub strike: f64,
    pub lower: f64,
    pub median: f64,
    pub upper: f64,
}

/// Per-cell bands plus the quantile levels that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct BandSummary {
    pub q_lo: f64,
    pub q_hi: f64,
    pub cells: Vec<BandCell>,
}

/// Band over every `(maturity, strike)`-tagged series of the chain, from the
/// draws after `burn_in`. The default credible band uses `(0.10, 0.90)`; the
/// envelope mode uses `(0, 1)` for per-cell minima and maxima. The levels must
/// straddle the median so each cell satisfies `lower <= median <= upper`.
pub fn band(chain: &Chain, burn_in: usize, q_lo: f64, q_hi: f64) -> Result<BandSummary> {
    if !q_lo.is_finite() || !q_hi.is_finite() || q_lo < 0.0 || q_lo > 0.5 || q_hi < 0.5 || q_hi > 1.0
    {
        return Err(Error::Config(format!(
            "band levels ({q_lo}, {q_hi}) must satisfy 0 <= q_lo <= 0.5 <= q_hi <= 1"
        )));
    }
    let len = chain.len();
    if burn_in >= len || len - burn_in < 10 {
        return Err(Error::BurnInTooLarge { burn_in, len });
    }
    let mut cells = Vec::new();
    for (label, col) in chain.labels.iter().zip(&chain.columns) {
        let Some((maturity, strike)) = label.cell else {
            continue;
        };
        let draws = &col[burn_in..];
        cells.push(BandCell {
            maturity,
            strike,
            lower: quantile(draws, q_lo)?,
            median: quantile(draws, 0.5)?,
            upper: quantile(draws, q_hi)?,
        });
    }
    if cells.is_empty() {
        return Err(Error::Empty {
            what: "cell-tagged chain series".to_string(),
        });
    }
    Ok(BandSummary { q_lo, q_hi, cells })
}

/// CSV rendering of a band summary: `maturity,strike,lower,median,upper`.
pub fn band_csv(summary: &BandSummary) -> String {
    let mut out = String::from("maturity,strike,lower,median,upper\n");
    for c in &summary.cells {
        writeln!(
            out,
            "{},{},{},{},{}",
            c.maturity, c.strike, c.lower, c.median, c.upper
        )
        .expect("string writes cannot fail");
    }
    out
}

/// CSV rendering of a chain: header `epoch,<series names>`, one row per
/// epoch in insertion order. Values print in the shortest form that parses
/// back to the identical bits, so re-exporting an unchanged chain is
/// byte-identical and a round trip through [`trace_import`] is lossless.
pub fn trace_csv(chain: &Chain) -> String {
    let mut out = String::from("epoch");
    for label in &chain.labels {
        out.push(',');
        out.push_str(&label.name);
    }
    out.push('\n');
    for (row, &epoch) in chain.epochs.iter().enumerate() {
        write!(out, "{epoch}").expect("string writes cannot fail");
        for col in &chain.columns {
            write!(out, ",{}", col[row]).expect("string writes cannot fail");
        }
        out.push('\n');
    }
    out
}

/// Writes [`trace_csv`] to a file.
pub fn trace_export(chain: &Chain, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, trace_csv(chain))?;
    Ok(())
}

/// Parses a [`trace_csv`] file back into a chain. Cell tags are not part of
/// the CSV, so the imported labels carry names only.
pub fn trace_import(text: &str) -> Result<Chain> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(Error::Csv {
        line: 1,
        detail: "missing header".to_string(),
    })?;
    let mut fields = header.split(',');
    if fields.next() != Some("epoch") {
        return Err(Error::Csv {
            line: 1,
            detail: "header must start with 'epoch'".to_string(),
        });
    }
    let labels: Vec<SeriesLabel> = fields.map(SeriesLabel::plain).collect();
    let mut chain = Chain::new(labels)?;
    let mut row = Vec::with_capacity(chain.labels.len());
    for (i, line) in lines {
        if line.is_empty() {
            continue;
        }
        let line_no = i + 1;
        let mut fields = line.split(',');
        let epoch: u64 = fields
            .next()
            .expect("split yields at least one field")
            .parse()
            .map_err(|e| Error::Csv {
                line: line_no,
                detail: format!("bad epoch: {e}"),
            })?;
        row.clear();
        for field in fields {
            row.push(field.parse().map_err(|e| Error::Csv {
                line: line_no,
                detail: format!("bad value {field:?}: {e}"),
            })?);
        }
        if row.len() != chain.labels.len() {
            return Err(Error::Csv {
                line: line_no,
                detail: format!(
                    "{} values for {} series",
                    row.len(),
                    chain.labels.len()
                ),
            });
        }
        chain.push(epoch, &row)?;
    }
    Ok(chain)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;
    use rand::Rng;

    use crate::nets::SgldOutcome;
    use crate::rng::SeedTree;

    fn noisy_chain(n: usize, seed: u64) -> Chain {
        let tree = SeedTree::new(seed);
        let mut rng = tree.stream("posterior-test", &[]);
        let mut chain = Chain::new(vec![
            SeriesLabel::plain("G"),
            SeriesLabel::cell("price_1", 0.5, 0.95),
            SeriesLabel::cell("price_2", 1.0, 1.05),
        ])
        .unwrap();
        for e in 0..n {
            let row = [
                rng.gen_range(0.0..5.0),
                0.10 + rng.gen_range(-0.02..0.02),
                0.04 + rng.gen_range(-0.01..0.01),
            ];
            chain.push(e as u64, &row).unwrap();
        }
        chain
    }

    #[test]
    fn quantile_reference_cases() {
        for q in [0.0, 0.17, 0.5, 0.99, 1.0] {
            assert_eq!(quantile(&[3.25; 7], q).unwrap(), 3.25);
        }

        let ascending: Vec<f64> = (1..=100).map(|k| k as f64).collect();
        assert!((quantile(&ascending, 0.1).unwrap() - 10.9).abs() < 1e-12);
        assert_eq!(quantile(&ascending, 0.0).unwrap(), 1.0);
        assert_eq!(quantile(&ascending, 1.0).unwrap(), 100.0);

        assert!(matches!(quantile(&[], 0.5), Err(Error::Empty { .. })));
        assert!(matches!(quantile(&[1.0], 1.2), Err(Error::Config(_))));
        assert!(matches!(quantile(&[1.0], -0.1), Err(Error::Config(_))));
        assert!(matches!(quantile(&[1.0], f64::NAN), Err(Error::Config(_))));
    }

    #[test]
    fn quantile_is_order_free_and_bounded() {
        let tree = SeedTree::new(4);
        let mut rng = tree.stream("posterior-test", &[]);
        let values: Vec<f64> = (0..57).map(|_| rng.gen_range(-3.0..9.0)).collect();
        let mut shuffled = values.clone();
        shuffled.shuffle(&mut rng);
        let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for k in 0..=20 {
            let q = k as f64 / 20.0;
            let a = quantile(&values, q).unwrap();
            let b = quantile(&shuffled, q).unwrap();
            assert_eq!(a, b);
            assert!((lo..=hi).contains(&a));
        }
    }

    #[test]
    fn monotone_transforms_commute_only_at_the_extremes() {
        let values = [0.4, 1.9, 0.2, 3.4, 2.8];
        for q in [0.0, 1.0] {
            let direct = quantile(&values.map(f64::exp), q).unwrap();
            let through = quantile(&values, q).unwrap().exp();
            assert_eq!(direct, through);
        }
        let direct = quantile(&values.map(f64::exp), 0.5).unwrap();
        let through = quantile(&values, 0.5).unwrap().exp();
        assert_eq!(direct, through); // odd length: the median is an order statistic

        let even = [0.0, 1.0];
        let direct = quantile(&even.map(f64::exp), 0.5).unwrap();
        let through = quantile(&even, 0.5).unwrap().exp();
        assert!((direct - (1.0 + std::f64::consts::E) / 2.0).abs() < 1e-15);
        assert!(direct != through);
    }

    #[test]
    fn widening_the_levels_never_narrows_a_cell() {
        let chain = noisy_chain(200, 9);
        let credible = band(&chain, 50, 0.10, 0.90).unwrap();
        let envelope = band(&chain, 50, 0.0, 1.0).unwrap();
        assert_eq!(credible.cells.len(), 2);
        for (c, e) in credible.cells.iter().zip(&envelope.cells) {
            assert_eq!((c.maturity, c.strike), (e.maturity, e.strike));
            assert!(c.lower <= c.median && c.median <= c.upper);
            assert!(e.lower <= c.lower);
            assert!(e.upper >= c.upper);
        }
    }

    #[test]
    fn bands_ignore_the_order_of_post_burn_in_draws() {
        let chain = noisy_chain(80, 12);
        let mut permuted = Chain::new(chain.labels().to_vec()).unwrap();
        let tree = SeedTree::new(13);
        let mut rng = tree.stream("posterior-test", &[]);
        let burn_in = 20;
        let mut order: Vec<usize> = (burn_in..chain.len()).collect();
        order.shuffle(&mut rng);
        let rows: Vec<Vec<f64>> = (0..chain.len())
            .map(|r| {
                chain
                    .labels()
                    .iter()
                    .map(|l| chain.series(&l.name).unwrap()[r])
                    .collect()
            })
            .collect();
        for r in 0..burn_in {
            permuted.push(r as u64, &rows[r]).unwrap();
        }
        for (k, &r) in order.iter().enumerate() {
            permuted.push((burn_in + k) as u64, &rows[r]).unwrap();
        }
        assert_eq!(
            band(&chain, burn_in, 0.1, 0.9).unwrap(),
            band(&permuted, burn_in, 0.1, 0.9).unwrap()
        );
    }

    #[test]
    fn burn_in_and_level_rules() {
        let chain = noisy_chain(20, 3);
        assert!(band(&chain, 10, 0.1, 0.9).is_ok());
        assert!(matches!(
            band(&chain, 11, 0.1, 0.9),
            Err(Error::BurnInTooLarge { burn_in: 11, len: 20 })
        ));
        assert!(matches!(
            band(&chain, 25, 0.1, 0.9),
            Err(Error::BurnInTooLarge { .. })
        ));

        let short = noisy_chain(9, 3);
        assert!(matches!(
            band(&short, 0, 0.1, 0.9),
            Err(Error::BurnInTooLarge { .. })
        ));

        let degenerate = band(&chain, 0, 0.5, 0.5).unwrap();
        for c in &degenerate.cells {
            assert_eq!(c.lower, c.median);
            assert_eq!(c.upper, c.median);
        }

        assert!(matches!(
            band(&chain, 0, 0.6, 0.9),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            band(&chain, 0, 0.1, 1.5),
            Err(Error::Config(_))
        ));

        let untagged = {
            let mut c = Chain::new(vec![SeriesLabel::plain("G")]).unwrap();
            for e in 0..12 {
                c.push(e, &[e as f64]).unwrap();
            }
            c
        };
        assert!(matches!(
            band(&untagged, 0, 0.1, 0.9),
            Err(Error::Empty { .. })
        ));
    }

    #[test]
    fn empty_chain_exports_a_header_only_file() {
        let chain = Chain::new(vec![
            SeriesLabel::plain("log_post"),
            SeriesLabel::plain("G"),
        ])
        .unwrap();
        assert_eq!(trace_csv(&chain), "epoch,log_post,G\n");
    }

    #[test]
    fn trace_round_trips_bit_for_bit() {
        let mut chain = Chain::new(vec![
            SeriesLabel::plain("G"),
            SeriesLabel::cell("price_1", 0.5, 1.0),
        ])
        .unwrap();
        let awkward = [
            [0.1, 1.0 / 3.0],
            [-0.0, 2.0f64.powi(-1074)],
            [1.7976931348623157e308, -5.551115123125783e-17],
            [123456.78901234567, 3.141592653589793],
        ];
        for (e, row) in awkward.iter().enumerate() {
            chain.push(e as u64, row).unwrap();
        }

        let text = trace_csv(&chain);
        assert_eq!(text, trace_csv(&chain));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.csv");
        trace_export(&chain, &path).unwrap();
        let first = std::fs::read(&path).unwrap();
        trace_export(&chain, &path).unwrap();
        assert_eq!(first, std::fs::read(&path).unwrap());

        let imported = trace_import(&text).unwrap();
        assert_eq!(imported.epochs(), chain.epochs());
        for label in chain.labels() {
            let a = chain.series(&label.name).unwrap();
            let b = imported.series(&label.name).unwrap();
            assert_eq!(a.len(), b.len());
            for (x, y) in a.iter().zip(b) {
                assert_eq!(x.to_bits(), y.to_bits(), "{} vs {}", x, y);
            }
        }

        assert!(matches!(
            trace_import("index,G\n"),
            Err(Error::Csv { line: 1, .. })
        ));
        assert!(matches!(
            trace_import("epoch,G\n0,1.0,2.0\n"),
            Err(Error::Csv { line: 2, .. })
        ));
        assert!(matches!(
            trace_import("epoch,G\nx,1.0\n"),
            Err(Error::Csv { line: 2, .. })
        ));
    }

    #[test]
    fn with_cells_restores_band_extraction_after_import() {
        let mut chain = Chain::new(vec![
            SeriesLabel::plain("log_post"),
            SeriesLabel::cell("price_1", 0.5, 0.9),
            SeriesLabel::cell("price_2", 1.0, 1.1),
        ])
        .unwrap();
        for e in 0..12 {
            let x = e as f64;
            chain.push(e, &[-x, 1.0 + 0.1 * x, 2.0 - 0.05 * x]).unwrap();
        }
        let direct = band(&chain, 0, 0.1, 0.9).unwrap();

        let imported = trace_import(&trace_csv(&chain)).unwrap();
        assert!(band(&imported, 0, 0.1, 0.9).is_err(), "tags are not serialized");
        let restored = imported.with_cells(&[(0.5, 0.9), (1.0, 1.1)]).unwrap();
        assert_eq!(band(&restored, 0, 0.1, 0.9).unwrap(), direct);

        let imported = trace_import(&trace_csv(&chain)).unwrap();
        assert!(matches!(
            imported.with_cells(&[(0.5, 0.9)]),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn record_chains_expose_the_trace_columns() {
        let records = vec![
            EpochRecord {
                epoch: 0,
                log_post: -12.0,
                misfit: 4.0,
                prices: vec![0.11, 0.042],
                cv_loss: Some(0.3),
                sgld: SgldOutcome::Applied,
            },
            EpochRecord {
                epoch: 1,
                log_post: -9.5,
                misfit: 2.5,
                prices: vec![0.105, 0.044],
                cv_loss: Some(0.2),
                sgld: SgldOutcome::Applied,
            },
        ];
        let cells = [(0.5, 0.95), (1.0, 1.05)];
        let chain = Chain::from_records(&records, &cells).unwrap();
        let text = trace_csv(&chain);
        assert_eq!(
            text,
            "epoch,log_post,G,price_1,price_2\n\
             0,-12,4,0.11,0.042\n\
             1,-9.5,2.5,0.105,0.044\n"
        );
        assert_eq!(chain.series("G").unwrap(), &[4.0, 2.5]);
        assert_eq!(chain.labels()[2].cell, Some((0.5, 0.95)));

        let bad = Chain::from_records(&records, &[(0.5, 0.95)]);
        assert!(matches!(bad, Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn band_csv_prints_one_row_per_cell() {
        let summary = BandSummary {
            q_lo: 0.1,
            q_hi: 0.9,
            cells: vec![
                BandCell {
                    maturity: 0.5,
                    strike: 0.95,
                    lower: 0.28,
                    median: 0.3,
                    upper: 0.325,
                },
                BandCell {
                    maturity: 1.0,
                    strike: 1.05,
                    lower: 0.26,
                    median: 0.29,
                    upper: 0.31,
                },
            ],
        };
        assert_eq!(
            band_csv(&summary),
            "maturity,strike,lower,median,upper\n\
             0.5,0.95,0.28,0.3,0.325\n\
             1,1.05,0.26,0.29,0.31\n"
        );
    }

    #[test]
    fn chain_construction_is_validated() {
        assert!(matches!(Chain::new(vec![]), Err(Error::Empty { .. })));
        assert!(Chain::new(vec![SeriesLabel::plain("a,b")]).is_err());
        assert!(Chain::new(vec![SeriesLabel::plain("")]).is_err());
        assert!(Chain::new(vec![
            SeriesLabel::plain("G"),
            SeriesLabel::plain("G")
        ])
        .is_err());

        let mut chain = Chain::new(vec![SeriesLabel::plain("G")]).unwrap();
        assert!(matches!(
            chain.push(0, &[1.0, 2.0]),
            Err(Error::ShapeMismatch { .. })
        ));
        assert!(chain.is_empty());
        chain.push(0, &[1.0]).unwrap();
        assert_eq!(chain.len(), 1);
        assert!(chain.series("H").is_none());
    }
}
