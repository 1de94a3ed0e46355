//! Labelmap assembly and parcellation metrics.
//!
//! Per-parcel vectors are indexed by `label - 1`; `None` marks a parcel that
//! is absent (empty) rather than scoring zero.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volio::{connected_components, Connectivity, Labelmap, Mask, Volume3D};

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub checkpoint_id: String,
    pub feature_checksum: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParcellationResult {
    pub labelmap: Labelmap,
    pub c: usize,
    pub subject_id: String,
    pub provenance: Provenance,
}

/// Writes each row's label at its voxel; voxels outside the nucleus stay 0.
pub fn assemble_labelmap(
    labels: &[u32],
    voxels: &[[usize; 3]],
    nucleus: &Mask,
    c: usize,
    subject_id: &str,
    provenance: Provenance,
) -> Result<ParcellationResult> {
    if labels.len() != voxels.len() || voxels.len() != nucleus.count() {
        return Err(Error::Shape(format!(
            "{} labels, {} mapped voxels, {} nucleus voxels",
            labels.len(),
            voxels.len(),
            nucleus.count()
        )));
    }
    let geom = nucleus.geometry.clone();
    let mut lm = Labelmap::zeros(geom.clone());
    for (&l, &v) in labels.iter().zip(voxels) {
        if l == 0 || l as usize > c {
            return Err(Error::Parameter(format!("label {l} outside 1..={c}")));
        }
        if v.iter().zip(geom.dims()).any(|(&x, d)| x >= d) || !nucleus.get(v) {
            return Err(Error::Shape(format!("voxel {v:?} is not in the nucleus")));
        }
        let idx = geom.index(v);
        if lm.data[idx] != 0 {
            return Err(Error::Shape(format!("voxel {v:?} mapped twice")));
        }
        lm.data[idx] = l;
    }
    Ok(ParcellationResult { labelmap: lm, c, subject_id: subject_id.to_owned(), provenance })
}

fn mean_present(v: &[Option<f64>]) -> Option<f64> {
    let present: Vec<f64> = v.iter().flatten().copied().collect();
    (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParcelScores {
    pub per_parcel: Vec<Option<f64>>,
    pub mean: f64,
}

impl ParcelScores {
    fn from_parcels(per_parcel: Vec<Option<f64>>, what: &str) -> Result<Self> {
        let mean = mean_present(&per_parcel).ok_or_else(|| Error::Degenerate(format!("no parcel yields a {what} value")))?;
        Ok(Self { per_parcel, mean })
    }
}

/// Spatial continuity: share of each parcel's voxels in its largest component.
pub fn metric_sc(p: &ParcellationResult, connectivity: Connectivity) -> Result<ParcelScores> {
    let per_parcel = (1..=p.c as u32)
        .map(|l| {
            let region = p.labelmap.region(l);
            let size = region.count();
            (size > 0).then(|| connected_components(&region, connectivity).sizes[0] as f64 / size as f64)
        })
        .collect();
    ParcelScores::from_parcels(per_parcel, "spatial continuity")
}

pub fn dice(a: &Mask, b: &Mask) -> Option<f64> {
    let (na, nb) = (a.count(), b.count());
    if na + nb == 0 {
        return None;
    }
    let inter = a.data().iter().zip(b.data()).filter(|(x, y)| **x != 0 && **y != 0).count();
    Some(2.0 * inter as f64 / (na + nb) as f64)
}

fn ensure_same_grid(a: &Labelmap, b: &Labelmap, what: &str) -> Result<()> {
    if a.geometry.same_grid(&b.geometry) {
        Ok(())
    } else {
        Err(Error::Shape(format!("{what}: grids differ")))
    }
}

/// Mean pairwise Dice per parcel across subjects, averaged over parcels.
pub fn metric_dice(results: &[&ParcellationResult]) -> Result<ParcelScores> {
    if results.len() < 2 {
        return Err(Error::Parameter("Dice needs at least two subjects".into()));
    }
    let c = results[0].c;
    for r in &results[1..] {
        ensure_same_grid(&results[0].labelmap, &r.labelmap, "Dice")?;
        if r.c != c {
            return Err(Error::Shape(format!("parcel counts differ: {c} vs {}", r.c)));
        }
    }
    let per_parcel = (1..=c as u32)
        .map(|l| {
            let regions: Vec<Mask> = results.iter().map(|r| r.labelmap.region(l)).collect();
            let mut scores = Vec::new();
            for i in 0..regions.len() {
                for j in i + 1..regions.len() {
                    scores.extend(dice(&regions[i], &regions[j]));
                }
            }
            (!scores.is_empty()).then(|| scores.iter().sum::<f64>() / scores.len() as f64)
        })
        .collect();
    ParcelScores::from_parcels(per_parcel, "Dice")
}

/// How the per-parcel FA spread is normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RsdMode {
    /// Population variance divided by the mean.
    #[default]
    VarianceOverMean,
    /// Population standard deviation divided by the mean.
    StdOverMean,
}

/// Per-parcel FA spread over mean, averaged over parcels.
pub fn metric_rsd(p: &ParcellationResult, fa: &Volume3D, mode: RsdMode) -> Result<ParcelScores> {
    if !p.labelmap.geometry.same_grid(&fa.geometry) {
        return Err(Error::Shape("FA volume and labelmap grids differ".into()));
    }
    let mut values: Vec<Vec<f64>> = vec![Vec::new(); p.c];
    for (&l, &v) in p.labelmap.data.iter().zip(&fa.data) {
        if l != 0 && (l as usize) <= p.c {
            values[l as usize - 1].push(v as f64);
        }
    }
    let per_parcel = values
        .iter()
        .enumerate()
        .map(|(i, v)| {
            if v.is_empty() {
                return None;
            }
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            if mean == 0.0 {
                log::warn!("parcel {} has zero mean FA; skipped", i + 1);
                return None;
            }
            let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            Some(match mode {
                RsdMode::VarianceOverMean => var / mean,
                RsdMode::StdOverMean => var.sqrt() / mean,
            })
        })
        .collect();
    ParcelScores::from_parcels(per_parcel, "RSD")
}

#[derive(Debug, Clone, PartialEq)]
pub struct AtlasDice {
    /// Atlas region each parcel is mapped to (`None` for empty parcels).
    pub mapping: Vec<Option<u32>>,
    /// `(region id, Dice)` for every atlas region present in the nucleus.
    pub per_region: Vec<(u32, f64)>,
    pub average: f64,
}

/// Maps parcels many-to-one onto atlas regions by maximal overlap (ties to
/// the smaller region id) and scores each region against its mapped union.
/// Only voxels inside the parcellated nucleus are considered.
pub fn atlas_dice(p: &ParcellationResult, atlas: &Labelmap) -> Result<AtlasDice> {
    ensure_same_grid(&p.labelmap, atlas, "atlas Dice")?;
    let nucleus = p.labelmap.support();
    let max_region = nucleus.foreground().map(|i| atlas.data[i]).max().unwrap_or(0) as usize;
    if max_region == 0 {
        return Err(Error::Degenerate("atlas has no labeled voxel inside the nucleus".into()));
    }
    let mut overlap = vec![vec![0usize; max_region + 1]; p.c + 1];
    for i in nucleus.foreground() {
        overlap[p.labelmap.data[i] as usize][atlas.data[i] as usize] += 1;
    }
    let mapping: Vec<Option<u32>> = (1..=p.c)
        .map(|l| {
            let row = &overlap[l];
            let mut best: Option<(usize, u32)> = None;
            for (r, &n) in row.iter().enumerate().skip(1) {
                if n > 0 && best.is_none_or(|(b, _)| n > b) {
                    best = Some((n, r as u32));
                }
            }
            best.map(|(_, r)| r)
        })
        .collect();
    let mut present = vec![false; max_region + 1];
    for i in nucleus.foreground() {
        present[atlas.data[i] as usize] = true;
    }
    let mut per_region = Vec::new();
    for r in 1..=max_region {
        if !present[r] {
            continue;
        }
        let region = Mask::from_fn(atlas.geometry.clone(), |v| {
            let i = atlas.geometry.index(v);
            nucleus.is_set(i) && atlas.data[i] as usize == r
        });
        let union = Mask::from_fn(atlas.geometry.clone(), |v| {
            let l = p.labelmap.data[atlas.geometry.index(v)] as usize;
            l != 0 && mapping[l - 1] == Some(r as u32)
        });
        per_region.push((r as u32, dice(&region, &union).unwrap_or(0.0)));
    }
    let average = per_region.iter().map(|(_, d)| d).sum::<f64>() / per_region.len() as f64;
    Ok(AtlasDice { mapping, per_region, average })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaStatsRow {
    pub subject: String,
    pub parcel: u32,
    pub count: usize,
    pub mean: f64,
    pub median: f64,
    pub std: f64,
}

/// Count, mean, median and population standard deviation of FA for every
/// nonempty parcel of every subject.
pub fn parcel_fa_stats(results: &[&ParcellationResult], fa: &[&Volume3D]) -> Result<Vec<FaStatsRow>> {
    if results.len() != fa.len() {
        return Err(Error::Shape(format!("{} parcellations but {} FA volumes", results.len(), fa.len())));
    }
    let mut rows = Vec::new();
    for (p, v) in results.iter().zip(fa) {
        if !p.labelmap.geometry.same_grid(&v.geometry) {
            return Err(Error::Shape(format!("{}: FA grid differs from the labelmap", p.subject_id)));
        }
        let mut values: Vec<Vec<f64>> = vec![Vec::new(); p.c];
        for (&l, &x) in p.labelmap.data.iter().zip(&v.data) {
            if l != 0 && (l as usize) <= p.c {
                values[l as usize - 1].push(x as f64);
            }
        }
        for (i, mut vals) in values.into_iter().enumerate() {
            if vals.is_empty() {
                continue;
            }
            vals.sort_by(f64::total_cmp);
            let n = vals.len();
            let mean = vals.iter().sum::<f64>() / n as f64;
            let median = if n % 2 == 1 { vals[n / 2] } else { (vals[n / 2 - 1] + vals[n / 2]) / 2.0 };
            let std = (vals.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64).sqrt();
            rows.push(FaStatsRow { subject: p.subject_id.clone(), parcel: i as u32 + 1, count: n, mean, median, std });
        }
    }
    Ok(rows)
}

/// Writes `subject,parcel,count,mean,median,std`.
pub fn export_parcel_fa_stats(results: &[&ParcellationResult], fa: &[&Volume3D], out: impl Write) -> Result<()> {
    let rows = parcel_fa_stats(results, fa)?;
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::Format(e.to_string()))
}

/// Per-parcel table combining spatial continuity, cross-subject Dice and RSD.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub c: usize,
    /// SC per parcel averaged over the subjects where the parcel is present.
    pub sc: Vec<Option<f64>>,
    pub dice: Vec<Option<f64>>,
    /// RSD contribution per parcel averaged over subjects.
    pub rsd: Vec<Option<f64>>,
    pub mean_sc: f64,
    pub mean_dice: Option<f64>,
    pub mean_rsd: Option<f64>,
}

fn average_columns(rows: &[Vec<Option<f64>>], c: usize) -> Vec<Option<f64>> {
    (0..c).map(|k| mean_present(&rows.iter().map(|r| r[k]).collect::<Vec<_>>())).collect()
}

impl MetricReport {
    /// Dice needs at least two subjects; RSD needs FA volumes.
    pub fn compute(
        results: &[&ParcellationResult],
        fa: Option<&[&Volume3D]>,
        connectivity: Connectivity,
        rsd_mode: RsdMode,
    ) -> Result<Self> {
        let first = results.first().ok_or_else(|| Error::Parameter("no parcellations given".into()))?;
        let c = first.c;
        let sc_rows = results.iter().map(|p| metric_sc(p, connectivity).map(|s| s.per_parcel)).collect::<Result<Vec<_>>>()?;
        let sc = average_columns(&sc_rows, c);
        let dice = if results.len() >= 2 { metric_dice(results)?.per_parcel } else { vec![None; c] };
        let rsd = match fa {
            Some(fa) => {
                if fa.len() != results.len() {
                    return Err(Error::Shape(format!("{} parcellations but {} FA volumes", results.len(), fa.len())));
                }
                let rows = results
                    .iter()
                    .zip(fa)
                    .map(|(p, v)| metric_rsd(p, v, rsd_mode).map(|s| s.per_parcel))
                    .collect::<Result<Vec<_>>>()?;
                average_columns(&rows, c)
            }
            None => vec![None; c],
        };
        Ok(Self {
            c,
            mean_sc: mean_present(&sc).expect("metric_sc found a parcel"),
            mean_dice: mean_present(&dice),
            mean_rsd: mean_present(&rsd),
            sc,
            dice,
            rsd,
        })
    }

    /// Writes `parcel,SC,Dice_mean,RSD_contribution`; absent values are empty.
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut w = csv::Writer::from_writer(out);
        let fmt = |e: csv::Error| Error::Format(e.to_string());
        w.write_record(["parcel", "SC", "Dice_mean", "RSD_contribution"]).map_err(fmt)?;
        for k in 0..self.c {
            w.write_record([(k + 1).to_string(), cell(self.sc[k]), cell(self.dice[k]), cell(self.rsd[k])]).map_err(fmt)?;
        }
        w.flush().map_err(|e| Error::Format(e.to_string()))
    }
}
