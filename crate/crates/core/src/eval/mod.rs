//! Retrieval metrics under the cross-view protocol: a gallery entry with
//! the query's identity and view is never counted.

use serde::{Deserialize, Serialize};

use crate::data::{IdentityDataset, Side};
use crate::error::{ensure_arg, Error, Result};
use crate::layers::{Ctx, Mode, ParamSet};
use crate::numerics::{Real, Tensor};
use crate::space::Network;

/// Row-major `[queries × gallery]` distances.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl DistanceMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        ensure_arg!(data.len() == rows * cols, "distance matrix {rows}×{cols} given {} values", data.len());
        Ok(DistanceMatrix { rows, cols, data })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

/// Identity and view labels of one side of a retrieval problem.
#[derive(Clone, Copy, Debug)]
pub struct Labels<'a> {
    pub ids: &'a [usize],
    pub views: &'a [usize],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    /// Match rate at ranks 1..=max_rank.
    pub cmc: Vec<f64>,
    pub map: f64,
    pub num_valid_queries: usize,
}

impl RetrievalResult {
    pub fn rank1(&self) -> f64 {
        self.cmc[0]
    }
}

/// Euclidean distances between rows of `q [n, D]` and `g [m, D]`.
pub fn distance_matrix<T: Real>(q: &Tensor<T>, g: &Tensor<T>) -> Result<DistanceMatrix> {
    ensure_arg!(
        q.rank() == 2 && g.rank() == 2 && q.shape()[1] == g.shape()[1],
        "distance_matrix needs [n, D] and [m, D], got {:?} and {:?}",
        q.shape(),
        g.shape()
    );
    let (n, m, d) = (q.shape()[0], g.shape()[0], q.shape()[1]);
    let (qv, gv) = (q.data(), g.data());
    let mut data = Vec::with_capacity(n * m);
    for i in 0..n {
        let a = &qv[i * d..(i + 1) * d];
        for j in 0..m {
            let b = &gv[j * d..(j + 1) * d];
            let s: f64 = a.iter().zip(b).map(|(&x, &y)| (x - y).to_f64().unwrap().powi(2)).sum();
            data.push(s.sqrt());
        }
    }
    DistanceMatrix::new(n, m, data)
}

fn check_labels(dist: &DistanceMatrix, query: Labels<'_>, gallery: Labels<'_>) -> Result<()> {
    ensure_arg!(
        query.ids.len() == dist.rows && query.views.len() == dist.rows,
        "{} queries but {} ids / {} views",
        dist.rows,
        query.ids.len(),
        query.views.len()
    );
    ensure_arg!(
        gallery.ids.len() == dist.cols && gallery.views.len() == dist.cols,
        "{} gallery entries but {} ids / {} views",
        dist.cols,
        gallery.ids.len(),
        gallery.views.len()
    );
    Ok(())
}

/// For each query, the match flags of its ranked, exclusion-filtered
/// gallery list; `None` for queries without any valid match. Ties in
/// distance go to the lower gallery index.
fn match_lists(dist: &DistanceMatrix, query: Labels<'_>, gallery: Labels<'_>) -> Result<Vec<Option<Vec<bool>>>> {
    check_labels(dist, query, gallery)?;
    let lists: Vec<Option<Vec<bool>>> = (0..dist.rows)
        .map(|i| {
            let row = dist.row(i);
            let mut order: Vec<usize> = (0..dist.cols)
                .filter(|&j| !(gallery.ids[j] == query.ids[i] && gallery.views[j] == query.views[i]))
                .collect();
            order.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
            let flags: Vec<bool> = order.iter().map(|&j| gallery.ids[j] == query.ids[i]).collect();
            flags.contains(&true).then_some(flags)
        })
        .collect();
    if lists.iter().all(Option::is_none) {
        return Err(Error::Evaluation("no query has a valid gallery match".into()));
    }
    Ok(lists)
}

/// Cumulative match curve over ranks 1..=max_rank and the number of valid queries.
pub fn cmc_curve(
    dist: &DistanceMatrix,
    query: Labels<'_>,
    gallery: Labels<'_>,
    max_rank: usize,
) -> Result<(Vec<f64>, usize)> {
    ensure_arg!(max_rank >= 1, "max_rank must be at least 1");
    let lists = match_lists(dist, query, gallery)?;
    let mut hits = vec![0usize; max_rank];
    let mut valid = 0;
    for flags in lists.iter().flatten() {
        valid += 1;
        let first = flags.iter().position(|&m| m).expect("valid lists contain a match");
        if first < max_rank {
            hits[first] += 1;
        }
    }
    let dropped = dist.rows - valid;
    if dropped > 0 {
        log::warn!("{dropped} queries have no valid gallery match and were dropped");
    }
    let mut acc = 0;
    let curve = hits
        .iter()
        .map(|&h| {
            acc += h;
            acc as f64 / valid as f64
        })
        .collect();
    Ok((curve, valid))
}

fn average_precision(flags: &[bool]) -> f64 {
    let mut found = 0usize;
    let mut sum = 0.0;
    for (r, &m) in flags.iter().enumerate() {
        if m {
            found += 1;
            sum += found as f64 / (r + 1) as f64;
        }
    }
    sum / found as f64
}

/// Mean over valid queries of average precision.
pub fn mean_ap(dist: &DistanceMatrix, query: Labels<'_>, gallery: Labels<'_>) -> Result<f64> {
    let lists = match_lists(dist, query, gallery)?;
    let aps: Vec<f64> = lists.iter().flatten().map(|f| average_precision(f)).collect();
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

pub fn retrieval(
    dist: &DistanceMatrix,
    query: Labels<'_>,
    gallery: Labels<'_>,
    max_rank: usize,
) -> Result<RetrievalResult> {
    let (cmc, num_valid_queries) = cmc_curve(dist, query, gallery, max_rank)?;
    let map = mean_ap(dist, query, gallery)?;
    Ok(RetrievalResult { cmc, map, num_valid_queries })
}

/// L2-normalized eval-mode embeddings `[n, D]` of the records at `indices`.
pub fn embed<T: Real>(
    net: &Network,
    ps: &ParamSet<T>,
    ds: &IdentityDataset,
    indices: &[usize],
    batch_size: usize,
) -> Result<Tensor<T>> {
    ensure_arg!(batch_size >= 1, "batch size must be positive");
    let mut rows: Vec<T> = Vec::new();
    let mut dim = 0;
    for chunk in indices.chunks(batch_size) {
        let mut ctx = Ctx::frozen(ps, Mode::Eval);
        let images = ctx.tape.constant(&ds.batch(chunk).cast());
        let out = net.forward(&mut ctx, images)?;
        let e = ctx.tape.l2_normalize(out.embedding, 1, T::from_f64_lossy(1e-12))?;
        dim = ctx.tape.shape(e)[1];
        rows.extend_from_slice(ctx.tape.value(e));
    }
    let t = Tensor::new(&[indices.len(), dim], rows)?;
    t.check_finite("embeddings")?;
    Ok(t)
}

/// Embeds the probe and gallery sides of `ds` and scores retrieval.
pub fn evaluate<T: Real>(net: &Network, ps: &ParamSet<T>, ds: &IdentityDataset, max_rank: usize) -> Result<RetrievalResult> {
    let probe = ds.side(Side::Probe);
    let gallery = ds.side(Side::Gallery);
    ensure_arg!(!probe.is_empty() && !gallery.is_empty(), "dataset lacks probe or gallery images");
    let q = embed(net, ps, ds, &probe, 64)?;
    let g = embed(net, ps, ds, &gallery, 64)?;
    let dist = distance_matrix(&q, &g)?;
    let label = |idx: &[usize]| -> (Vec<usize>, Vec<usize>) {
        (idx.iter().map(|&i| ds.records[i].identity).collect(), idx.iter().map(|&i| ds.records[i].view).collect())
    };
    let (qi, qv) = label(&probe);
    let (gi, gv) = label(&gallery);
    retrieval(&dist, Labels { ids: &qi, views: &qv }, Labels { ids: &gi, views: &gv }, max_rank)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ap_of_matches_at_one_and_three() {
        assert!((average_precision(&[true, false, true, false, false]) - 5.0 / 6.0).abs() < 1e-15);
        assert_eq!(average_precision(&[true, true]), 1.0);
    }
}
