use serde::{Deserialize, Serialize};

use super::distributions::{f_sf, ptukey_sf, t_two_sided};
use super::{mean, variance, SampleGroups, StatsError, StatsResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LeveneCenter {
    #[default]
    Mean,
    Median,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeveneResult {
    pub center: LeveneCenter,
    pub w: f64,
    pub df1: f64,
    pub df2: f64,
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnovaResult {
    pub f: f64,
    pub df1: f64,
    pub df2: f64,
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseResult {
    pub a: String,
    pub b: String,
    pub mean_diff: f64,
    pub q: f64,
    pub df: f64,
    pub p: f64,
    pub significant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WelchT {
    pub t: f64,
    pub df: f64,
    pub p: f64,
}

fn median(x: &[f64]) -> f64 {
    let mut s = x.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

// Equal group means give a between-group term of exactly zero, which the
// weighted grand mean would otherwise miss by rounding.
fn all_equal(means: &[f64]) -> bool {
    means.windows(2).all(|w| w[0] == w[1])
}

// One-way ANOVA F with its degrees of freedom. A zero between-group sum is
// F = 0 even when the within-group sum also vanishes.
fn one_way_f(groups: &[Vec<f64>]) -> (f64, f64, f64) {
    let k = groups.len();
    let n: usize = groups.iter().map(Vec::len).sum();
    let grand = groups.iter().flatten().sum::<f64>() / n as f64;
    let means: Vec<f64> = groups.iter().map(|g| mean(g)).collect();
    let between: f64 = if all_equal(&means) {
        0.0
    } else {
        groups.iter().zip(&means).map(|(g, m)| g.len() as f64 * (m - grand).powi(2)).sum()
    };
    let within: f64 = groups
        .iter()
        .map(|g| {
            let m = mean(g);
            g.iter().map(|x| (x - m).powi(2)).sum::<f64>()
        })
        .sum();
    let (df1, df2) = ((k - 1) as f64, (n - k) as f64);
    let f = if between == 0.0 {
        0.0
    } else if within == 0.0 {
        f64::INFINITY
    } else {
        (between / df1) / (within / df2)
    };
    (f, df1, df2)
}

/// Levene's test: one-way ANOVA on absolute deviations from each group's
/// centre.
pub fn levene(samples: &SampleGroups, center: LeveneCenter) -> StatsResult<LeveneResult> {
    samples.check(2)?;
    let deviations: Vec<Vec<f64>> = samples
        .groups
        .iter()
        .map(|g| {
            let c = match center {
                LeveneCenter::Mean => mean(g),
                LeveneCenter::Median => median(g),
            };
            g.iter().map(|x| (x - c).abs()).collect()
        })
        .collect();
    let (w, df1, df2) = one_way_f(&deviations);
    Ok(LeveneResult {
        center,
        w,
        df1,
        df2,
        p: f_sf(w, df1, df2),
    })
}

/// Welch's heteroscedastic one-way ANOVA.
pub fn welch_anova(samples: &SampleGroups) -> StatsResult<AnovaResult> {
    samples.check(2)?;
    let k = samples.len() as f64;
    let mut stats = Vec::with_capacity(samples.len());
    for (label, g) in samples.labels.iter().zip(&samples.groups) {
        let v = variance(g);
        if v <= 0.0 {
            return Err(StatsError::ZeroVariance(label.clone()));
        }
        stats.push((g.len() as f64, mean(g), v));
    }
    let weights: Vec<f64> = stats.iter().map(|(n, _, v)| n / v).collect();
    let w_sum: f64 = weights.iter().sum();
    let centre = stats.iter().zip(&weights).map(|((_, m, _), w)| w * m).sum::<f64>() / w_sum;
    let a = stats
        .iter()
        .zip(&weights)
        .map(|((_, m, _), w)| w * (m - centre).powi(2))
        .sum::<f64>()
        / (k - 1.0);
    let lambda: f64 = stats
        .iter()
        .zip(&weights)
        .map(|((n, _, _), w)| (1.0 - w / w_sum).powi(2) / (n - 1.0))
        .sum();
    let b = 1.0 + 2.0 * (k - 2.0) / (k * k - 1.0) * lambda;
    let means: Vec<f64> = stats.iter().map(|s| s.1).collect();
    let f = if all_equal(&means) { 0.0 } else { a / b };
    let df1 = k - 1.0;
    let df2 = (k * k - 1.0) / (3.0 * lambda);
    Ok(AnovaResult {
        f,
        df1,
        df2,
        p: f_sf(f, df1, df2),
    })
}

/// Games-Howell pairwise comparisons, ordered (0,1), (0,2), …, (k−2,k−1).
pub fn games_howell(samples: &SampleGroups, alpha: f64) -> StatsResult<Vec<PairwiseResult>> {
    samples.check(2)?;
    let k = samples.len();
    let summary: Vec<(f64, f64, f64)> = samples
        .groups
        .iter()
        .map(|g| (g.len() as f64, mean(g), variance(g)))
        .collect();
    let mut out = Vec::with_capacity(k * (k - 1) / 2);
    for i in 0..k {
        for j in i + 1..k {
            let (ni, mi, vi) = summary[i];
            let (nj, mj, vj) = summary[j];
            let (ei, ej) = (vi / ni, vj / nj);
            let diff = mi - mj;
            let se = ((ei + ej) / 2.0).sqrt();
            let df = (ei + ej).powi(2) / (ei * ei / (ni - 1.0) + ej * ej / (nj - 1.0));
            let (q, p) = if diff == 0.0 {
                (0.0, 1.0)
            } else if se == 0.0 {
                (f64::INFINITY, 0.0)
            } else {
                let q = diff.abs() / se;
                (q, ptukey_sf(q, k, df))
            };
            out.push(PairwiseResult {
                a: samples.labels[i].clone(),
                b: samples.labels[j].clone(),
                mean_diff: diff,
                q,
                df,
                p,
                significant: p < alpha,
            });
        }
    }
    Ok(out)
}

/// Two-sided Welch t-test.
pub fn welch_t_test(a: &[f64], b: &[f64]) -> StatsResult<WelchT> {
    for (label, g) in [("a", a), ("b", b)] {
        if g.len() < 2 {
            return Err(StatsError::GroupTooSmall {
                label: label.into(),
                size: g.len(),
            });
        }
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (ea, eb) = (variance(a) / na, variance(b) / nb);
    let diff = mean(a) - mean(b);
    let df = (ea + eb).powi(2) / (ea * ea / (na - 1.0) + eb * eb / (nb - 1.0));
    let (t, p) = if diff == 0.0 {
        (0.0, 1.0)
    } else if ea + eb == 0.0 {
        (diff.signum() * f64::INFINITY, 0.0)
    } else {
        let t = diff / (ea + eb).sqrt();
        (t, t_two_sided(t, df))
    };
    Ok(WelchT { t, df, p })
}

/// The three-step protocol: Levene for variance homogeneity, Welch ANOVA
/// for the factor, Games-Howell for the pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub labels: Vec<String>,
    pub sizes: Vec<usize>,
    pub means: Vec<f64>,
    pub std_devs: Vec<f64>,
    pub alpha: f64,
    pub levene: LeveneResult,
    pub welch: AnovaResult,
    pub games_howell: Vec<PairwiseResult>,
}

pub fn compare(samples: &SampleGroups, center: LeveneCenter, alpha: f64) -> StatsResult<ComparisonReport> {
    let lev = levene(samples, center)?;
    let welch = welch_anova(samples)?;
    let pairs = games_howell(samples, alpha)?;
    Ok(ComparisonReport {
        labels: samples.labels.clone(),
        sizes: samples.groups.iter().map(Vec::len).collect(),
        means: samples.groups.iter().map(|g| mean(g)).collect(),
        std_devs: samples.groups.iter().map(|g| variance(g).sqrt()).collect(),
        alpha,
        levene: lev,
        welch,
        games_howell: pairs,
    })
}

impl ComparisonReport {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        s.push_str("group\tn\tmean\tsd\n");
        for i in 0..self.labels.len() {
            s.push_str(&format!(
                "{}\t{}\t{:.6}\t{:.6}\n",
                self.labels[i], self.sizes[i], self.means[i], self.std_devs[i]
            ));
        }
        let l = &self.levene;
        s.push_str(&format!(
            "\nlevene ({:?}-centred)\tW = {:.6}\tdf = ({}, {})\tp = {:.6e}\n",
            l.center, l.w, l.df1, l.df2, l.p
        ));
        let w = &self.welch;
        s.push_str(&format!(
            "welch anova\tF = {:.6}\tdf = ({}, {:.3})\tp = {:.6e}\n",
            w.f, w.df1, w.df2, w.p
        ));
        s.push_str(&format!("\ngames-howell (alpha = {})\n", self.alpha));
        s.push_str("a\tb\tdiff\tq\tdf\tp\tsig\n");
        for r in &self.games_howell {
            s.push_str(&format!(
                "{}\t{}\t{:.6}\t{:.4}\t{:.3}\t{:.6e}\t{}\n",
                r.a,
                r.b,
                r.mean_diff,
                r.q,
                r.df,
                r.p,
                if r.significant { "*" } else { "" }
            ));
        }
        s
    }
}
