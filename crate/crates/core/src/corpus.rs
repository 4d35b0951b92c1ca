//! Synthetic paired corpora with planted semantic clusters and planted
//! pathology patches.
//!
//! Every instance draws a latent from its cluster center plus noise; the
//! report global is that latent and the image global is the latent plus
//! background noise. Pathology tokens share a latent direction with one
//! planted patch each. Filler tokens and background patches are isotropic
//! noise.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Matrix;
use crate::error::{Error, Result};
use crate::features::{cosine_sim, normalize};

pub const CORPUS_HEADER: &str = "SISTA-CORPUS v1";

/// Largest spread at which at least 90% of same-cluster report pairs clear a
/// 0.9 cosine at the default dimensions (measured: 99%).
pub const PLANTED_CLUSTER_SPREAD: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSpec {
    pub num_instances: usize,
    pub raw_dim: usize,
    pub num_clusters: usize,
    pub cluster_spread: f64,
    pub patches_per_image: usize,
    pub tokens_per_report: usize,
    pub num_pathology_tokens_per_instance: usize,
    /// Size of the pool of pathology directions shared by the corpus.
    pub num_pathologies: usize,
    pub pathology_signal_strength: f64,
    pub background_noise: f64,
    pub augment_noise: f64,
    /// Importance of a pathology token relative to a filler token.
    pub pathology_importance: f64,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            num_instances: 200,
            raw_dim: 32,
            num_clusters: 4,
            cluster_spread: 0.6,
            patches_per_image: 6,
            tokens_per_report: 4,
            num_pathology_tokens_per_instance: 2,
            num_pathologies: 8,
            pathology_signal_strength: 1.0,
            background_noise: 0.5,
            augment_noise: 0.1,
            pathology_importance: 3.0,
            seed: 0,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, why: String| Err(Error::config(format!("corpus.{key}: {why}")));
        if self.raw_dim == 0 {
            return bad("raw_dim", "must be at least 1".into());
        }
        if self.num_clusters == 0 {
            return bad("num_clusters", "must be at least 1".into());
        }
        if self.num_clusters > self.num_instances.max(1) {
            return bad(
                "num_clusters",
                format!("{} clusters for {} instances", self.num_clusters, self.num_instances),
            );
        }
        if self.patches_per_image == 0 {
            return bad("patches_per_image", "must be at least 1".into());
        }
        if self.tokens_per_report == 0 {
            return bad("tokens_per_report", "must be at least 1".into());
        }
        let n_path = self.num_pathology_tokens_per_instance;
        if n_path > self.patches_per_image {
            return bad(
                "num_pathology_tokens_per_instance",
                format!("{n_path} exceeds {} patches", self.patches_per_image),
            );
        }
        if n_path > self.tokens_per_report {
            return bad(
                "num_pathology_tokens_per_instance",
                format!("{n_path} exceeds {} tokens", self.tokens_per_report),
            );
        }
        if n_path > self.num_pathologies {
            return bad(
                "num_pathologies",
                format!("pool of {} cannot supply {n_path} per instance", self.num_pathologies),
            );
        }
        for (key, v) in [
            ("cluster_spread", self.cluster_spread),
            ("pathology_signal_strength", self.pathology_signal_strength),
            ("background_noise", self.background_noise),
            ("augment_noise", self.augment_noise),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(key, format!("must be a nonnegative number, got {v}"));
            }
        }
        if !(self.pathology_importance > 0.0) {
            return bad("pathology_importance", "must be positive".into());
        }
        Ok(())
    }

    /// Default spec with tightly planted clusters.
    pub fn planted() -> Self {
        Self {
            cluster_spread: PLANTED_CLUSTER_SPREAD,
            ..Self::default()
        }
    }

    /// Fraction of patches planted for any single pathology token.
    pub fn chance_hit_rate(&self) -> f64 {
        1.0 / self.patches_per_image as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawInstance {
    pub cluster_id: usize,
    pub image_global: Vec<f64>,
    pub patches: Matrix,
    pub report_global: Vec<f64>,
    pub tokens: Matrix,
    pub token_importance: Vec<f64>,
    /// Planted patch for each pathology token, `None` for filler tokens.
    pub planted_patch: Vec<Option<usize>>,
    pub image_global_aug: Vec<f64>,
    pub report_global_aug: Vec<f64>,
}

impl RawInstance {
    pub fn pathology_tokens(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.planted_patch
            .iter()
            .enumerate()
            .filter_map(|(l, p)| p.map(|k| (l, k)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub spec: CorpusSpec,
    pub instances: Vec<RawInstance>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn cluster_ids(&self) -> Vec<usize> {
        self.instances.iter().map(|i| i.cluster_id).collect()
    }
}

/// Gaussian vector whose expected squared norm is `scale^2`.
fn gaussian<R: Rng + ?Sized>(rng: &mut R, dim: usize, scale: f64) -> Vec<f64> {
    let s = scale / (dim as f64).sqrt();
    (0..dim)
        .map(|_| s * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        .collect()
}

fn unit<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Vec<f64> {
    loop {
        if let Ok(v) = normalize(&gaussian(rng, dim, 1.0)) {
            return v.into_inner();
        }
    }
}

fn axpy(acc: &mut [f64], a: f64, x: &[f64]) {
    for (y, v) in acc.iter_mut().zip(x) {
        *y += a * v;
    }
}

fn normalized(v: &[f64]) -> Result<Vec<f64>> {
    Ok(normalize(v)?.into_inner())
}

pub fn generate_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let d = spec.raw_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let centers: Vec<Vec<f64>> = (0..spec.num_clusters).map(|_| unit(&mut rng, d)).collect();
    let pathologies: Vec<Vec<f64>> = (0..spec.num_pathologies).map(|_| unit(&mut rng, d)).collect();
    let n_path = spec.num_pathology_tokens_per_instance;
    let cluster_pathologies: Vec<Vec<usize>> = (0..spec.num_clusters)
        .map(|_| sample(&mut rng, spec.num_pathologies, n_path).into_vec())
        .collect();

    let mut instances = Vec::with_capacity(spec.num_instances);
    for i in 0..spec.num_instances {
        let cluster_id = i % spec.num_clusters;
        let mut latent = centers[cluster_id].clone();
        axpy(&mut latent, 1.0, &gaussian(&mut rng, d, spec.cluster_spread));
        let report_global = normalized(&latent)?;
        let mut image = report_global.clone();
        axpy(&mut image, 1.0, &gaussian(&mut rng, d, spec.background_noise));
        let image_global = normalized(&image)?;

        let m = spec.patches_per_image;
        let l = spec.tokens_per_report;
        let patch_slots = sample(&mut rng, m, n_path).into_vec();
        let token_slots = sample(&mut rng, l, n_path).into_vec();

        let mut patches = Matrix::zeros(m, d);
        for k in 0..m {
            let noise = gaussian(&mut rng, d, spec.background_noise);
            patches.row_mut(k).copy_from_slice(&noise);
        }
        let mut tokens = Matrix::zeros(l, d);
        let mut planted_patch = vec![None; l];
        for (j, &q) in cluster_pathologies[cluster_id].iter().enumerate() {
            axpy(
                patches.row_mut(patch_slots[j]),
                spec.pathology_signal_strength,
                &pathologies[q],
            );
            let mut tok = pathologies[q].clone();
            axpy(&mut tok, 1.0, &gaussian(&mut rng, d, spec.background_noise));
            tokens.row_mut(token_slots[j]).copy_from_slice(&tok);
            planted_patch[token_slots[j]] = Some(patch_slots[j]);
        }
        for (li, planted) in planted_patch.iter().enumerate() {
            if planted.is_none() {
                tokens.row_mut(li).copy_from_slice(&gaussian(&mut rng, d, 1.0));
            }
        }

        let raw: Vec<f64> = planted_patch
            .iter()
            .map(|p| if p.is_some() { spec.pathology_importance } else { 1.0 })
            .collect();
        let scale = l as f64 / raw.iter().sum::<f64>();
        let token_importance = raw.into_iter().map(|u| u * scale).collect();

        let mut inst = RawInstance {
            cluster_id,
            image_global,
            patches,
            report_global,
            tokens,
            token_importance,
            planted_patch,
            image_global_aug: Vec::new(),
            report_global_aug: Vec::new(),
        };
        let aug_seed = rng.next_u64();
        let (ia, ra) = augment_instance(&inst, spec.augment_noise, aug_seed)?;
        inst.image_global_aug = ia;
        inst.report_global_aug = ra;
        instances.push(inst);
    }
    Ok(Corpus {
        spec: *spec,
        instances,
    })
}

/// Feature-space stand-ins for image transforms and report rewrites:
/// `normalize(original + noise)` for both globals.
pub fn augment_instance(
    inst: &RawInstance,
    augment_noise: f64,
    seed: u64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if augment_noise == 0.0 {
        return Ok((inst.image_global.clone(), inst.report_global.clone()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = inst.image_global.len();
    let mut image = inst.image_global.clone();
    axpy(&mut image, 1.0, &gaussian(&mut rng, d, augment_noise));
    let mut report = inst.report_global.clone();
    axpy(&mut report, 1.0, &gaussian(&mut rng, d, augment_noise));
    Ok((normalized(&image)?, normalized(&report)?))
}

/// Summary statistics printed after generation.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusStats {
    pub instances: usize,
    pub clusters: usize,
    pub pathology_tokens: usize,
    /// Same-cluster report pairs with raw cosine at or above the threshold.
    pub same_cluster_above: f64,
    /// Different-cluster report pairs with raw cosine at or above the threshold.
    pub cross_cluster_above: f64,
    /// Pathology tokens whose max-inner-product patch is their planted one.
    pub raw_recoverability: f64,
}

pub fn corpus_stats(corpus: &Corpus, threshold: f64) -> Result<CorpusStats> {
    let n = corpus.len();
    let (mut same, mut same_hit, mut cross, mut cross_hit) = (0usize, 0usize, 0usize, 0usize);
    for i in 0..n {
        for k in (i + 1)..n {
            let a = &corpus.instances[i];
            let b = &corpus.instances[k];
            let hit = cosine_sim(&a.report_global, &b.report_global)? >= threshold;
            if a.cluster_id == b.cluster_id {
                same += 1;
                same_hit += hit as usize;
            } else {
                cross += 1;
                cross_hit += hit as usize;
            }
        }
    }
    let (mut tokens, mut recovered) = (0usize, 0usize);
    for inst in &corpus.instances {
        for (l, k) in inst.pathology_tokens() {
            tokens += 1;
            let tok = inst.tokens.row(l);
            let best = (0..inst.patches.rows())
                .map(|p| crate::autodiff::dot(tok, inst.patches.row(p)))
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |b, (i, v)| if v > b.1 { (i, v) } else { b })
                .0;
            recovered += (best == k) as usize;
        }
    }
    let frac = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok(CorpusStats {
        instances: n,
        clusters: corpus.spec.num_clusters,
        pathology_tokens: tokens,
        same_cluster_above: frac(same_hit, same),
        cross_cluster_above: frac(cross_hit, cross),
        raw_recoverability: frac(recovered, tokens),
    })
}

// ---------------------------------------------------------------------------
// Text format

fn push_floats(out: &mut String, key: &str, values: &[f64]) {
    out.push_str(key);
    for v in values {
        write!(out, " {v:?}").expect("write to string");
    }
    out.push('\n');
}

pub fn format_corpus(corpus: &Corpus) -> String {
    let s = &corpus.spec;
    let mut out = String::new();
    out.push_str(CORPUS_HEADER);
    out.push('\n');
    writeln!(
        out,
        "spec num_instances={} raw_dim={} num_clusters={} cluster_spread={:?} patches_per_image={} \
         tokens_per_report={} num_pathology_tokens_per_instance={} num_pathologies={} \
         pathology_signal_strength={:?} background_noise={:?} augment_noise={:?} \
         pathology_importance={:?} seed={}",
        s.num_instances,
        s.raw_dim,
        s.num_clusters,
        s.cluster_spread,
        s.patches_per_image,
        s.tokens_per_report,
        s.num_pathology_tokens_per_instance,
        s.num_pathologies,
        s.pathology_signal_strength,
        s.background_noise,
        s.augment_noise,
        s.pathology_importance,
        s.seed
    )
    .expect("write to string");
    writeln!(out, "instances {}", corpus.instances.len()).expect("write to string");
    for (i, inst) in corpus.instances.iter().enumerate() {
        writeln!(
            out,
            "instance {i} cluster {} patches {} tokens {}",
            inst.cluster_id,
            inst.patches.rows(),
            inst.tokens.rows()
        )
        .expect("write to string");
        push_floats(&mut out, "image_global", &inst.image_global);
        push_floats(&mut out, "image_global_aug", &inst.image_global_aug);
        push_floats(&mut out, "report_global", &inst.report_global);
        push_floats(&mut out, "report_global_aug", &inst.report_global_aug);
        for p in inst.patches.iter_rows() {
            push_floats(&mut out, "patch", p);
        }
        for t in inst.tokens.iter_rows() {
            push_floats(&mut out, "token", t);
        }
        push_floats(&mut out, "importance", &inst.token_importance);
        out.push_str("planted");
        for p in &inst.planted_patch {
            match p {
                Some(k) => write!(out, " {k}").expect("write to string"),
                None => out.push_str(" -"),
            }
        }
        out.push('\n');
    }
    out
}

struct LineReader<'a> {
    lines: Vec<&'a str>,
    pos: usize,
}

impl<'a> LineReader<'a> {
    fn line_no(&self) -> usize {
        self.pos + 1
    }

    fn next(&mut self, what: &str) -> Result<&'a str> {
        let line = self
            .lines
            .get(self.pos)
            .ok_or_else(|| Error::parse(self.line_no(), format!("unexpected end of file, expected {what}")))?;
        self.pos += 1;
        Ok(line)
    }

    /// Consumes a line `key v1 v2 ...`, returning the tokens after the key.
    fn keyed(&mut self, key: &str) -> Result<(usize, Vec<&'a str>)> {
        let line_no = self.line_no();
        let line = self.next(key)?;
        let mut parts = line.split(' ');
        match parts.next() {
            Some(k) if k == key => Ok((line_no, parts.collect())),
            other => Err(Error::parse(
                line_no,
                format!("expected `{key}`, found `{}`", other.unwrap_or("")),
            )),
        }
    }

    fn floats(&mut self, key: &str, expected: usize) -> Result<Vec<f64>> {
        let (line_no, parts) = self.keyed(key)?;
        if parts.len() != expected {
            return Err(Error::parse(
                line_no,
                format!("`{key}` needs {expected} values, found {}", parts.len()),
            ));
        }
        parts.iter().map(|t| parse_num(t, line_no)).collect()
    }
}

fn parse_num<T: std::str::FromStr>(t: &str, line: usize) -> Result<T> {
    t.parse()
        .map_err(|_| Error::parse(line, format!("malformed number `{t}`")))
}

fn parse_spec(line_no: usize, parts: &[&str]) -> Result<CorpusSpec> {
    let mut spec = CorpusSpec::default();
    let mut seen = Vec::new();
    for part in parts {
        let (k, v) = part
            .split_once('=')
            .ok_or_else(|| Error::parse(line_no, format!("malformed spec entry `{part}`")))?;
        match k {
            "num_instances" => spec.num_instances = parse_num(v, line_no)?,
            "raw_dim" => spec.raw_dim = parse_num(v, line_no)?,
            "num_clusters" => spec.num_clusters = parse_num(v, line_no)?,
            "cluster_spread" => spec.cluster_spread = parse_num(v, line_no)?,
            "patches_per_image" => spec.patches_per_image = parse_num(v, line_no)?,
            "tokens_per_report" => spec.tokens_per_report = parse_num(v, line_no)?,
            "num_pathology_tokens_per_instance" => {
                spec.num_pathology_tokens_per_instance = parse_num(v, line_no)?
            }
            "num_pathologies" => spec.num_pathologies = parse_num(v, line_no)?,
            "pathology_signal_strength" => spec.pathology_signal_strength = parse_num(v, line_no)?,
            "background_noise" => spec.background_noise = parse_num(v, line_no)?,
            "augment_noise" => spec.augment_noise = parse_num(v, line_no)?,
            "pathology_importance" => spec.pathology_importance = parse_num(v, line_no)?,
            "seed" => spec.seed = parse_num(v, line_no)?,
            other => return Err(Error::parse(line_no, format!("unknown spec key `{other}`"))),
        }
        seen.push(k);
    }
    if seen.len() != 13 {
        return Err(Error::parse(line_no, "spec line must list all 13 keys"));
    }
    Ok(spec)
}

pub fn parse_corpus(text: &str) -> Result<Corpus> {
    let mut r = LineReader {
        lines: text.lines().collect(),
        pos: 0,
    };
    let header = r.next("header")?;
    if header != CORPUS_HEADER {
        return Err(Error::parse(1, format!("expected `{CORPUS_HEADER}`, found `{header}`")));
    }
    let (line_no, parts) = r.keyed("spec")?;
    let spec = parse_spec(line_no, &parts)?;
    let (line_no, parts) = r.keyed("instances")?;
    let count: usize = match parts[..] {
        [n] => parse_num(n, line_no)?,
        _ => return Err(Error::parse(line_no, "`instances` takes one count")),
    };
    let d = spec.raw_dim;
    let mut instances = Vec::with_capacity(count);
    for i in 0..count {
        let (line_no, parts) = r.keyed("instance")?;
        let [idx, "cluster", c, "patches", m, "tokens", l] = parts[..] else {
            return Err(Error::parse(line_no, "malformed instance header"));
        };
        if parse_num::<usize>(idx, line_no)? != i {
            return Err(Error::parse(line_no, format!("instance index {idx}, expected {i}")));
        }
        let cluster_id = parse_num(c, line_no)?;
        let m: usize = parse_num(m, line_no)?;
        let l: usize = parse_num(l, line_no)?;
        let image_global = r.floats("image_global", d)?;
        let image_global_aug = r.floats("image_global_aug", d)?;
        let report_global = r.floats("report_global", d)?;
        let report_global_aug = r.floats("report_global_aug", d)?;
        let mut patches = Vec::with_capacity(m * d);
        for _ in 0..m {
            patches.extend(r.floats("patch", d)?);
        }
        let mut tokens = Vec::with_capacity(l * d);
        for _ in 0..l {
            tokens.extend(r.floats("token", d)?);
        }
        let token_importance = r.floats("importance", l)?;
        let (line_no, parts) = r.keyed("planted")?;
        if parts.len() != l {
            return Err(Error::parse(line_no, format!("`planted` needs {l} entries")));
        }
        let planted_patch = parts
            .iter()
            .map(|t| match *t {
                "-" => Ok(None),
                t => {
                    let k: usize = parse_num(t, line_no)?;
                    if k >= m {
                        return Err(Error::parse(line_no, format!("planted patch {k} out of {m}")));
                    }
                    Ok(Some(k))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        instances.push(RawInstance {
            cluster_id,
            image_global,
            patches: Matrix::new(m, d, patches)?,
            report_global,
            tokens: Matrix::new(l, d, tokens)?,
            token_importance,
            planted_patch,
            image_global_aug,
            report_global_aug,
        });
    }
    if r.pos < r.lines.len() {
        return Err(Error::parse(r.line_no(), "trailing content after last instance"));
    }
    Ok(Corpus { spec, instances })
}

pub fn write_corpus(corpus: &Corpus, path: &Path) -> Result<()> {
    std::fs::write(path, format_corpus(corpus))?;
    Ok(())
}

pub fn read_corpus(path: &Path) -> Result<Corpus> {
    parse_corpus(&std::fs::read_to_string(path)?)
}
