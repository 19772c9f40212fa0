//! Attention rollout, cross-client map divergence, and artifact export.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::federation::RoundReport;
use crate::tensor::Tensor;

/// Per-block, per-head `m×m` attention weights for one example.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionTrace {
    pub tokens: usize,
    /// Token 0 is a class token.
    pub class_token: bool,
    /// block → head → row-major `m×m`.
    pub blocks: Vec<Vec<Vec<f64>>>,
}

/// Saliency over the patch grid, normalized to `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionMap {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadFusion {
    Max,
    Mean,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutConfig {
    pub fusion: HeadFusion,
    /// Fraction of each fused block matrix zeroed before the residual step.
    pub discard_ratio: f64,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        RolloutConfig {
            fusion: HeadFusion::Max,
            discard_ratio: 0.3,
        }
    }
}

fn matmul_sq(a: &[f64], b: &[f64], m: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * m];
    for i in 0..m {
        for k in 0..m {
            let aik = a[i * m + k];
            if aik == 0.0 {
                continue;
            }
            for j in 0..m {
                c[i * m + j] += aik * b[k * m + j];
            }
        }
    }
    c
}

/// Zeroes the `count` smallest entries; ties go to the lower index first.
fn discard_smallest(a: &mut [f64], count: usize) {
    let mut order: Vec<usize> = (0..a.len()).collect();
    order.sort_by(|&i, &j| a[i].total_cmp(&a[j]).then(i.cmp(&j)));
    for &i in order.iter().take(count) {
        a[i] = 0.0;
    }
}

/// Fuses heads, filters, adds the residual identity, and row-normalizes one block.
fn block_matrix(heads: &[Vec<f64>], m: usize, cfg: &RolloutConfig) -> Vec<f64> {
    let mut a = heads[0].clone();
    match cfg.fusion {
        HeadFusion::Max => {
            for h in &heads[1..] {
                a.iter_mut().zip(h).for_each(|(x, y)| *x = x.max(*y));
            }
        }
        HeadFusion::Mean => {
            for h in &heads[1..] {
                a.iter_mut().zip(h).for_each(|(x, y)| *x += y);
            }
            a.iter_mut().for_each(|x| *x /= heads.len() as f64);
        }
    }
    discard_smallest(&mut a, (cfg.discard_ratio * (m * m) as f64).floor() as usize);
    for i in 0..m {
        for j in 0..m {
            a[i * m + j] = 0.5 * a[i * m + j] + if i == j { 0.5 } else { 0.0 };
        }
        let row = &mut a[i * m..(i + 1) * m];
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    a
}

/// Product of the residual-augmented block matrices, last block leftmost.
pub fn rollout_matrix(trace: &AttentionTrace, cfg: &RolloutConfig) -> Result<Vec<f64>> {
    let m = trace.tokens;
    if trace.blocks.is_empty() || m == 0 {
        return Err(Error::shape("attention_rollout", "at least one block", "empty trace"));
    }
    for (b, heads) in trace.blocks.iter().enumerate() {
        if heads.is_empty() || heads.iter().any(|h| h.len() != m * m) {
            return Err(Error::shape(
                "attention_rollout",
                format!("block {b}: non-empty heads of {m}x{m}"),
                format!("{} heads", heads.len()),
            ));
        }
    }
    if !(0.0..1.0).contains(&cfg.discard_ratio) {
        return Err(Error::Config(format!("discard_ratio {} outside [0, 1)", cfg.discard_ratio)));
    }
    let mut r = block_matrix(&trace.blocks[0], m, cfg);
    for heads in &trace.blocks[1..] {
        let a = block_matrix(heads, m, cfg);
        r = matmul_sq(&a, &r, m);
    }
    Ok(r)
}

/// Rolls attention through depth and reads off per-patch saliency.
///
/// With a class token, the class row restricted to patch columns is used;
/// otherwise the mean over all rows. The result is min-max normalized; a
/// constant map becomes all ones, or all zeros if it is zero everywhere.
pub fn attention_rollout(trace: &AttentionTrace, cfg: &RolloutConfig) -> Result<AttentionMap> {
    let m = trace.tokens;
    let r = rollout_matrix(trace, cfg)?;
    let raw: Vec<f64> = if trace.class_token {
        r[1..m].to_vec()
    } else {
        (0..m)
            .map(|j| (0..m).map(|i| r[i * m + j]).sum::<f64>() / m as f64)
            .collect()
    };
    let n = raw.len();
    if n == 0 {
        return Err(Error::shape("attention_rollout", "at least one patch", 0));
    }
    let side = (n as f64).sqrt().round() as usize;
    let (rows, cols) = if side * side == n { (side, side) } else { (1, n) };
    Ok(AttentionMap {
        rows,
        cols,
        values: min_max(&raw),
    })
}

fn min_max(v: &[f64]) -> Vec<f64> {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo <= 0.0 {
        let fill = if hi > 0.0 { 1.0 } else { 0.0 };
        return vec![fill; v.len()];
    }
    v.iter().map(|x| (x - lo) / (hi - lo)).collect()
}

/// Mean over unordered pairs of the L2 distance between maps.
pub fn map_divergence(maps: &[AttentionMap]) -> Result<f64> {
    if maps.len() < 2 {
        return Err(Error::shape("map_divergence", "at least 2 maps", maps.len()));
    }
    let (r, c) = (maps[0].rows, maps[0].cols);
    if let Some(bad) = maps.iter().find(|m| m.rows != r || m.cols != c) {
        return Err(Error::shape(
            "map_divergence",
            format!("{r}x{c} grid"),
            format!("{}x{}", bad.rows, bad.cols),
        ));
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..maps.len() {
        for j in i + 1..maps.len() {
            let d: f64 = maps[i]
                .values
                .iter()
                .zip(&maps[j].values)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            total += d.sqrt();
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

/// Header shared by the round and per-client metrics files.
pub const METRICS_HEADER: &str = "round,client_id,train_loss,test_acc,weighted_acc";

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

/// One summary row per round; `client_id` is `all`, `train_loss` the
/// sample-weighted mean over the cohort and `test_acc` the unweighted mean
/// over clients.
pub fn metrics_csv(reports: &[RoundReport]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in reports {
        let _ = writeln!(
            s,
            "{},all,{},{},{}",
            r.round,
            r.mean_train_loss(),
            fmt_opt(r.mean_test_acc()),
            fmt_opt(r.weighted_acc),
        );
    }
    s
}

/// One row per sampled or evaluated client per round.
pub fn client_metrics_csv(reports: &[RoundReport]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in reports {
        let mut ids: Vec<usize> = r.train_loss.iter().map(|(i, _)| *i).collect();
        ids.extend(r.test_acc.iter().map(|(i, _)| *i));
        ids.sort_unstable();
        ids.dedup();
        for id in ids {
            let loss = r.train_loss.iter().find(|(i, _)| *i == id).map(|(_, l)| *l);
            let acc = r.test_acc.iter().find(|(i, _)| *i == id).map(|(_, a)| *a);
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                r.round,
                id,
                fmt_opt(loss),
                fmt_opt(acc),
                fmt_opt(r.weighted_acc)
            );
        }
    }
    s
}

/// `client_id,e0,...,e{D-1}`.
pub fn embeddings_csv(embeddings: &[Tensor]) -> String {
    let dim = embeddings.first().map_or(0, Tensor::len);
    let mut s = String::from("client_id");
    for i in 0..dim {
        let _ = write!(s, ",e{i}");
    }
    s.push('\n');
    for (id, z) in embeddings.iter().enumerate() {
        let _ = write!(s, "{id}");
        for v in z.data() {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    s
}

/// Binary greyscale PGM (P5), one byte per cell, `round(255·v)`.
pub fn pgm_bytes(map: &AttentionMap) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", map.cols, map.rows).into_bytes();
    out.extend(
        map.values
            .iter()
            .map(|v| (255.0 * v.clamp(0.0, 1.0)).round() as u8),
    );
    out
}

pub(crate) fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes metrics, per-client metrics, embeddings and named maps under
/// `run_dir`; returns the paths written.
pub fn export_artifacts(
    run_dir: &Path,
    reports: &[RoundReport],
    embeddings: &[Tensor],
    maps: &[(String, AttentionMap)],
) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let mut put = |name: &str, bytes: Vec<u8>| -> Result<()> {
        let p = run_dir.join(name);
        write_file(&p, bytes)?;
        written.push(p);
        Ok(())
    };
    put("metrics.csv", metrics_csv(reports).into_bytes())?;
    put("client_metrics.csv", client_metrics_csv(reports).into_bytes())?;
    if !embeddings.is_empty() {
        put("embeddings.csv", embeddings_csv(embeddings).into_bytes())?;
    }
    for (name, map) in maps {
        put(&format!("maps/{name}.pgm"), pgm_bytes(map))?;
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform(m: usize) -> Vec<f64> {
        vec![1.0 / m as f64; m * m]
    }

    fn identity(m: usize) -> Vec<f64> {
        (0..m * m).map(|i| if i / m == i % m { 1.0 } else { 0.0 }).collect()
    }

    fn no_filter() -> RolloutConfig {
        RolloutConfig {
            discard_ratio: 0.0,
            ..RolloutConfig::default()
        }
    }

    #[test]
    fn uniform_attention_gives_uniform_map() {
        let trace = AttentionTrace {
            tokens: 5,
            class_token: true,
            blocks: vec![vec![uniform(5)]],
        };
        let map = attention_rollout(&trace, &no_filter()).unwrap();
        assert_eq!((map.rows, map.cols), (2, 2));
        assert_eq!(map.values, vec![1.0; 4]);
    }

    #[test]
    fn identity_attention_is_uniform_over_patches() {
        let trace = AttentionTrace {
            tokens: 5,
            class_token: true,
            blocks: vec![vec![identity(5), identity(5)]; 3],
        };
        let map = attention_rollout(&trace, &RolloutConfig::default()).unwrap();
        assert!(map.values.iter().all(|&v| v == map.values[0]));
    }

    /// 2 tokens (class + one patch), two blocks, hand-multiplied.
    #[test]
    fn two_token_rollout_matches_hand_product() {
        let a1 = vec![0.8, 0.2, 0.4, 0.6];
        let a2 = vec![0.3, 0.7, 0.5, 0.5];
        let trace = AttentionTrace {
            tokens: 2,
            class_token: true,
            blocks: vec![vec![a1.clone()], vec![a2.clone()]],
        };
        // 0.5A + 0.5I rows already sum to one
        let r1 = [0.9, 0.1, 0.2, 0.8];
        let r2 = [0.65, 0.35, 0.25, 0.75];
        let prod = [
            r2[0] * r1[0] + r2[1] * r1[2],
            r2[0] * r1[1] + r2[1] * r1[3],
            r2[2] * r1[0] + r2[3] * r1[2],
            r2[2] * r1[1] + r2[3] * r1[3],
        ];
        let r = rollout_matrix(&trace, &no_filter()).unwrap();
        for (a, b) in r.iter().zip(prod) {
            assert!((a - b).abs() < 1e-12);
        }
        // with one patch the normalized map is a constant
        let map = attention_rollout(&trace, &no_filter()).unwrap();
        assert_eq!(map.values, vec![1.0]);
    }

    #[test]
    fn single_block_equals_class_row() {
        let m = 5;
        let mut a = vec![0.0; m * m];
        for i in 0..m {
            let row: Vec<f64> = (0..m).map(|j| ((i * 7 + j * 3) % 5) as f64 + 1.0).collect();
            let s: f64 = row.iter().sum();
            for j in 0..m {
                a[i * m + j] = row[j] / s;
            }
        }
        let trace = AttentionTrace {
            tokens: m,
            class_token: true,
            blocks: vec![vec![a.clone()]],
        };
        let map = attention_rollout(&trace, &no_filter()).unwrap();
        let expect = min_max(&a[1..m]);
        for (x, y) in map.values.iter().zip(expect) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn filter_zeroes_exact_count_with_index_ties() {
        let mut a = vec![0.5; 9];
        a[4] = 0.1;
        discard_smallest(&mut a, 2);
        assert_eq!(a[4], 0.0);
        assert_eq!(a[0], 0.0);
        assert_eq!(a.iter().filter(|v| **v == 0.0).count(), 2);
    }

    #[test]
    fn block_rows_stay_stochastic() {
        let m = 4;
        let heads = vec![uniform(m), identity(m)];
        let a = block_matrix(&heads, m, &RolloutConfig::default());
        for row in a.chunks(m) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn head_order_does_not_matter() {
        let m = 5;
        let h1: Vec<f64> = (0..m * m).map(|i| ((i * 13) % 7) as f64).collect();
        let h2: Vec<f64> = (0..m * m).map(|i| ((i * 5) % 11) as f64).collect();
        let norm = |v: Vec<f64>| {
            let mut v = v;
            for r in v.chunks_mut(m) {
                let s: f64 = r.iter().sum();
                r.iter_mut().for_each(|x| *x /= s);
            }
            v
        };
        let (h1, h2) = (norm(h1), norm(h2));
        let t = |a: &Vec<f64>, b: &Vec<f64>| AttentionTrace {
            tokens: m,
            class_token: true,
            blocks: vec![vec![a.clone(), b.clone()]; 2],
        };
        let cfg = RolloutConfig::default();
        assert_eq!(
            attention_rollout(&t(&h1, &h2), &cfg).unwrap(),
            attention_rollout(&t(&h2, &h1), &cfg).unwrap()
        );
    }

    #[test]
    fn incomplete_trace_fails() {
        let trace = AttentionTrace {
            tokens: 3,
            class_token: true,
            blocks: vec![vec![uniform(3)], vec![]],
        };
        assert!(attention_rollout(&trace, &RolloutConfig::default()).is_err());
        let short = AttentionTrace {
            tokens: 3,
            class_token: true,
            blocks: vec![vec![vec![0.0; 4]]],
        };
        assert!(attention_rollout(&short, &RolloutConfig::default()).is_err());
    }

    #[test]
    fn divergence_arithmetic() {
        let a = AttentionMap {
            rows: 2,
            cols: 2,
            values: vec![0.0; 4],
        };
        let b = AttentionMap {
            values: vec![1.0; 4],
            ..a.clone()
        };
        assert_eq!(map_divergence(&[a.clone(), a.clone()]).unwrap(), 0.0);
        assert!((map_divergence(&[a.clone(), b]).unwrap() - 2.0).abs() < 1e-15);
        let c = AttentionMap {
            rows: 1,
            cols: 4,
            values: vec![0.0; 4],
        };
        assert!(map_divergence(&[a.clone(), c]).is_err());
        assert!(map_divergence(&[a]).is_err());
    }

    #[test]
    fn pgm_of_ones() {
        let map = AttentionMap {
            rows: 4,
            cols: 4,
            values: vec![1.0; 16],
        };
        let bytes = pgm_bytes(&map);
        let header = b"P5\n4 4\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(&bytes[header.len()..], &[255u8; 16]);
    }

    #[test]
    fn embeddings_csv_header() {
        let z = vec![Tensor::zeros(vec![3]), Tensor::full(vec![3], 0.5)];
        let csv = embeddings_csv(&z);
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("client_id,e0,e1,e2"));
        assert_eq!(lines.nth(1), Some("1,0.5,0.5,0.5"));
    }
}
