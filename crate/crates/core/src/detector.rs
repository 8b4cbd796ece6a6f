//! Training and inference: split, per-hop Saab fitting, channel-wise
//! classifiers, discriminant-channel selection, image-level ensemble,
//! metrics and model-size accounting.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::boost::{self, fit_stumps, BoostParams, StumpEnsemble};
use crate::error::{Error, Result};
use crate::image_io::{block_view, Label, Perturbation, Tile, BLOCK};
use crate::json;
use crate::par;
use crate::pixelhop::{positions, BlockBuf};
use crate::saab::{fit_from_moments, FitReport, PatchConfig, SaabFilterBank, SecondMoments};

pub const FORMAT_VERSION: u32 = 1;

/// The three patch geometries: 2x2x3, 3x3x3 and 4x4x3.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Hop {
    A,
    B,
    C,
}

impl Hop {
    pub fn patch_config(self) -> PatchConfig {
        PatchConfig::square(match self {
            Hop::A => 2,
            Hop::B => 3,
            Hop::C => 4,
        })
    }

    pub fn channels(self) -> usize {
        self.patch_config().dim()
    }
}

impl fmt::Display for Hop {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for Hop {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "A" => Ok(Hop::A),
            "B" => Ok(Hop::B),
            "C" => Ok(Hop::C),
            _ => Err(Error::Invalid(format!("unknown hop {s:?} (expected A, B or C)"))),
        }
    }
}

/// Parses `A,B,C`-style hop lists.
pub fn parse_hops(s: &str) -> Result<Vec<Hop>> {
    let mut hops = s.split(',').map(str::parse).collect::<Result<Vec<Hop>>>()?;
    let n = hops.len();
    hops.dedup();
    if hops.len() != n {
        return Err(Error::Invalid(format!("repeated hop in {s:?}")));
    }
    Ok(hops)
}

fn hops_label(hops: &[Hop]) -> String {
    hops.iter().map(Hop::to_string).collect::<Vec<_>>().join("&")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ChannelId {
    pub hop: Hop,
    pub channel: usize,
}

impl fmt::Display for ChannelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.hop, self.channel)
    }
}

/// `HOP:K`, e.g. `B:26`.
impl FromStr for ChannelId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let (h, k) = s.split_once(':').ok_or_else(|| Error::Invalid(format!("channel {s:?} is not HOP:K")))?;
        let hop: Hop = h.parse()?;
        let channel: usize = k.parse().map_err(|_| Error::Invalid(format!("bad channel index in {s:?}")))?;
        if channel >= hop.channels() {
            return Err(Error::Index { index: channel, len: hop.channels() });
        }
        Ok(ChannelId { hop, channel })
    }
}

/// A candidate number of channels in the validation sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ChannelCount {
    Count(usize),
    All(AllChannels),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AllChannels {
    All,
}

impl ChannelCount {
    pub const ALL: ChannelCount = ChannelCount::All(AllChannels::All);

    fn resolve(self, available: usize) -> usize {
        match self {
            ChannelCount::Count(k) => k.min(available),
            ChannelCount::All(_) => available,
        }
    }
}

impl FromStr for ChannelCount {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("all") {
            return Ok(ChannelCount::ALL);
        }
        match s.parse::<usize>() {
            Ok(k) if k > 0 => Ok(ChannelCount::Count(k)),
            _ => Err(Error::Invalid(format!("bad channel count {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions { train: 0.8, val: 0.1, test: 0.1 }
    }
}

impl SplitFractions {
    fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|f| !(0.0..=1.0).contains(f)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Invalid(format!("split fractions {parts:?} must be in [0, 1] and sum to 1")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub hops: Vec<Hop>,
    pub max_channels_per_hop: usize,
    pub channel_grid: Vec<ChannelCount>,
    pub boost: BoostParams,
    pub split: SplitFractions,
    pub seed: u64,
    /// Keep classifiers of unselected channels (for per-channel heat maps).
    #[serde(default)]
    pub retain_all_channels: bool,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            hops: vec![Hop::B],
            max_channels_per_hop: 48,
            channel_grid: vec![
                ChannelCount::Count(1),
                ChannelCount::Count(2),
                ChannelCount::Count(3),
                ChannelCount::Count(4),
                ChannelCount::Count(8),
                ChannelCount::ALL,
            ],
            boost: BoostParams::default(),
            split: SplitFractions::default(),
            seed: 0,
            retain_all_channels: false,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hops.is_empty() {
            return Err(Error::Invalid("at least one hop is required".into()));
        }
        if self.channel_grid.is_empty() || self.max_channels_per_hop == 0 {
            return Err(Error::Invalid("channel grid and per-hop cap must be non-empty".into()));
        }
        self.split.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelScore {
    pub hop: Hop,
    pub channel: usize,
    pub f1_train: f64,
    pub f1_val: f64,
    pub energy: f64,
}

impl ChannelScore {
    pub fn id(&self) -> ChannelId {
        ChannelId { hop: self.hop, channel: self.channel }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HopBank {
    pub hop: Hop,
    pub bank: SaabFilterBank,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelClassifier {
    pub id: ChannelId,
    pub model: StumpEnsemble,
}

/// One point of the channel-count sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub per_hop: Vec<usize>,
    pub n_channels: usize,
    pub val_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorModel {
    pub format_version: u32,
    pub config: DetectorConfig,
    /// `(height, width)` of the tiles the model was trained on.
    pub tile_size: (usize, usize),
    pub perturbation: Perturbation,
    pub banks: Vec<HopBank>,
    pub channel_classifiers: Vec<ChannelClassifier>,
    pub selected: Vec<ChannelId>,
    pub ensemble: StumpEnsemble,
    pub channel_report: Vec<ChannelScore>,
    pub selection_sweep: Vec<SweepEntry>,
}

impl DetectorModel {
    pub fn n_channels(&self) -> usize {
        self.selected.len()
    }

    pub fn blocks_per_tile(&self) -> usize {
        (self.tile_size.0 / BLOCK) * (self.tile_size.1 / BLOCK)
    }

    pub fn bank(&self, hop: Hop) -> Option<&SaabFilterBank> {
        self.banks.iter().find(|b| b.hop == hop).map(|b| &b.bank)
    }

    pub fn classifier(&self, id: ChannelId) -> Option<&StumpEnsemble> {
        self.channel_classifiers.iter().find(|c| c.id == id).map(|c| &c.model)
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        json::to_vec(self)
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_slice(bytes)?;
        let version = value
            .get("format_version")
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| Error::Invalid("model file has no format_version".into()))?;
        if version != FORMAT_VERSION as u64 {
            return Err(Error::FormatVersion(version as u32));
        }
        let model: DetectorModel = serde_json::from_value(value)?;
        model.check()?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        json::write_file(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&bytes)
    }

    fn check(&self) -> Result<()> {
        for id in &self.selected {
            if self.bank(id.hop).is_none() || self.classifier(*id).is_none() {
                return Err(Error::MissingChannel(id.to_string()));
            }
        }
        for b in &self.banks {
            if b.bank.config() != b.hop.patch_config() {
                return Err(Error::ConfigMismatch {
                    expected: b.hop.patch_config().to_string(),
                    actual: b.bank.config().to_string(),
                });
            }
        }
        let want = self.blocks_per_tile() * self.n_channels();
        if self.ensemble.n_features != want {
            return Err(Error::Shape(format!(
                "ensemble expects {} features, model layout gives {want}",
                self.ensemble.n_features
            )));
        }
        Ok(())
    }
}

/// Confusion counts with Fake as the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Metrics {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize, tn: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        Metrics { tp, fp, fn_, tn, precision, recall, f1: f1_score(precision, recall) }
    }

    /// `truth` and `predicted` are "is fake" flags.
    pub fn from_predictions(truth: impl IntoIterator<Item = bool>, predicted: impl IntoIterator<Item = bool>) -> Self {
        let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
        for (t, p) in truth.into_iter().zip(predicted) {
            match (t, p) {
                (true, true) => tp += 1,
                (false, true) => fp += 1,
                (true, false) => fn_ += 1,
                (false, false) => tn += 1,
            }
        }
        Metrics::from_counts(tp, fp, fn_, tn)
    }
}

/// Harmonic mean of precision and recall; zero when both are zero.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Indices into the tile list for each part.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded stratified split. Each class is shuffled and cut by the fractions
/// (rounded per class), so class ratios match the global ratio to within a
/// tile in every part.
pub fn split_dataset(tiles: &[Tile], fractions: SplitFractions, seed: u64) -> Result<DatasetSplit> {
    fractions.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = DatasetSplit { train: Vec::new(), val: Vec::new(), test: Vec::new() };
    for label in [Label::Real, Label::Fake] {
        let mut idx: Vec<usize> = (0..tiles.len()).filter(|&i| tiles[i].label == label).collect();
        if idx.is_empty() {
            return Err(Error::SingleClass);
        }
        idx.shuffle(&mut rng);
        let n = idx.len();
        let n_train = ((n as f64 * fractions.train).round() as usize).min(n);
        let n_val = ((n as f64 * fractions.val).round() as usize).min(n - n_train);
        split.train.extend_from_slice(&idx[..n_train]);
        split.val.extend_from_slice(&idx[n_train..n_train + n_val]);
        split.test.extend_from_slice(&idx[n_train + n_val..]);
    }
    if tiles.iter().any(|t| t.label == Label::Unknown) {
        return Err(Error::Invalid("cannot split tiles with unknown labels".into()));
    }
    split.train.sort_unstable();
    split.val.sort_unstable();
    split.test.sort_unstable();
    Ok(split)
}

/// Blocks of a set of tiles in tile-major, row-major order.
struct BlockSet {
    blocks: Vec<BlockBuf>,
    /// Fake flag per block, inherited from the tile.
    fake: Vec<bool>,
    blocks_per_tile: usize,
}

impl BlockSet {
    fn new(tiles: &[&Tile]) -> Result<Self> {
        let blocks_per_tile = tiles.first().map_or(0, |t| t.blocks_per_tile());
        let per_tile = par::try_map(tiles, |t| tile_blocks(t))?;
        let mut blocks = Vec::with_capacity(tiles.len() * blocks_per_tile);
        let mut fake = Vec::with_capacity(blocks.capacity());
        for (t, bs) in tiles.iter().zip(per_tile) {
            if bs.len() != blocks_per_tile {
                return Err(Error::Shape(format!("tile {} differs in size from the first tile", t.id)));
            }
            fake.extend(std::iter::repeat_n(t.label == Label::Fake, bs.len()));
            blocks.extend(bs);
        }
        Ok(BlockSet { blocks, fake, blocks_per_tile })
    }

    fn targets(&self) -> Vec<f64> {
        self.fake.iter().map(|&f| if f { 1.0 } else { 0.0 }).collect()
    }

    fn tile_labels(&self) -> Vec<bool> {
        self.fake.iter().step_by(self.blocks_per_tile.max(1)).copied().collect()
    }

    /// `blocks x positions` feature matrix of one channel.
    fn channel_matrix(&self, bank: &SaabFilterBank, channel: usize) -> Array2<f64> {
        let p = positions(bank.config());
        let mut x = Array2::zeros((self.blocks.len(), p));
        for (mut row, b) in x.rows_mut().into_iter().zip(&self.blocks) {
            let plane = b.channel_planes(bank, &[channel]).pop().expect("one channel");
            row.as_slice_mut().expect("standard layout").copy_from_slice(&plane);
        }
        x
    }
}

fn tile_blocks(tile: &Tile) -> Result<Vec<BlockBuf>> {
    let mut out = Vec::with_capacity(tile.blocks_per_tile());
    for r in 0..tile.height() / BLOCK {
        for c in 0..tile.width() / BLOCK {
            out.push(BlockBuf::new(block_view(&tile.pixels, r * BLOCK, c * BLOCK))?);
        }
    }
    Ok(out)
}

fn scores_of(model: &StumpEnsemble, x: &Array2<f64>) -> Vec<f64> {
    x.rows()
        .into_iter()
        .map(|r| boost::sigmoid(model.margin_unchecked(r.as_slice().expect("standard layout"))))
        .collect()
}

fn f1_at_half(scores: &[f64], fake: &[bool]) -> f64 {
    Metrics::from_predictions(fake.iter().copied(), scores.iter().map(|&s| s >= 0.5)).f1
}

/// Output of channel-wise training for one hop.
pub struct HopTraining {
    pub hop: Hop,
    pub bank: SaabFilterBank,
    pub fit_report: FitReport,
    /// One classifier per channel, in channel order.
    pub classifiers: Vec<StumpEnsemble>,
    pub scores: Vec<ChannelScore>,
    /// Soft scores per channel for every training / validation block.
    train_block_scores: Vec<Vec<f64>>,
    val_block_scores: Vec<Vec<f64>>,
}

/// Fits the hop's Saab bank on all training patches, then one boosted-stump
/// classifier per channel on the per-block spatial responses.
pub fn train_channelwise(train: &[&Tile], val: &[&Tile], hop: Hop, params: &BoostParams) -> Result<HopTraining> {
    if train.is_empty() {
        return Err(Error::InsufficientData("no training tiles".into()));
    }
    let train_blocks = BlockSet::new(train)?;
    let val_blocks = BlockSet::new(val)?;
    train_channelwise_blocks(&train_blocks, &val_blocks, hop, params)
}

fn train_channelwise_blocks(train: &BlockSet, val: &BlockSet, hop: Hop, params: &BoostParams) -> Result<HopTraining> {
    let config = hop.patch_config();
    let l = config.dim();
    if !train.fake.contains(&true) || !train.fake.contains(&false) {
        return Err(Error::SingleClass);
    }

    // Fixed chunking keeps the reduction order independent of thread count.
    let chunks: Vec<&[BlockBuf]> = train.blocks.chunks(64).collect();
    let partial = par::map(&chunks, |chunk| {
        let mut m = SecondMoments::new(l);
        for b in *chunk {
            b.accumulate(config, &mut m);
        }
        m
    });
    let mut moments = SecondMoments::new(l);
    for m in &partial {
        moments.merge(m);
    }
    let fit = fit_from_moments(&moments, config)?;
    if fit.report.ac_rank == 0 {
        return Err(Error::DegenerateInput(format!("hop {hop}: training patches carry no AC energy")));
    }
    let bank = fit.bank;

    let y = train.targets();
    let per_channel = par::map_range(l, |k| -> Result<_> {
        let x = train.channel_matrix(&bank, k);
        let model = fit_stumps(x.view(), &y, params)?;
        let train_scores = scores_of(&model, &x);
        drop(x);
        let val_scores = scores_of(&model, &val.channel_matrix(&bank, k));
        Ok((model, train_scores, val_scores))
    });

    let mut classifiers = Vec::with_capacity(l);
    let mut scores = Vec::with_capacity(l);
    let mut train_block_scores = Vec::with_capacity(l);
    let mut val_block_scores = Vec::with_capacity(l);
    for (k, r) in per_channel.into_iter().enumerate() {
        let (model, tr, va) = r?;
        scores.push(ChannelScore {
            hop,
            channel: k,
            f1_train: f1_at_half(&tr, &train.fake),
            f1_val: f1_at_half(&va, &val.fake),
            energy: bank.energies()[k],
        });
        classifiers.push(model);
        train_block_scores.push(tr);
        val_block_scores.push(va);
    }
    Ok(HopTraining { hop, bank, fit_report: fit.report, classifiers, scores, train_block_scores, val_block_scores })
}

/// Channels of one hop ranked by validation F1 (ties to the lower index).
pub fn rank_channels(scores: &[ChannelScore]) -> Vec<ChannelId> {
    let mut ranked: Vec<&ChannelScore> = scores.iter().collect();
    ranked.sort_by(|a, b| b.f1_val.total_cmp(&a.f1_val).then(a.channel.cmp(&b.channel)));
    ranked.iter().map(|s| s.id()).collect()
}

/// Candidate per-hop channel counts for the sweep. A single hop sweeps the
/// whole grid; several hops each contribute their top one or two channels.
pub fn candidate_counts(config: &DetectorConfig, channels_per_hop: &[usize]) -> Vec<Vec<usize>> {
    let cap = |avail: usize| avail.min(config.max_channels_per_hop);
    if let [avail] = channels_per_hop {
        let mut ks: Vec<usize> =
            config.channel_grid.iter().map(|c| c.resolve(cap(*avail))).filter(|&k| k >= 1).collect();
        ks.sort_unstable();
        ks.dedup();
        return ks.into_iter().map(|k| vec![k]).collect();
    }
    let mut ks: Vec<usize> = config
        .channel_grid
        .iter()
        .map(|c| c.resolve(2))
        .filter(|&k| (1..=2).contains(&k) && k <= config.max_channels_per_hop)
        .collect();
    ks.sort_unstable();
    ks.dedup();
    if ks.is_empty() {
        ks.push(1);
    }
    ks.into_iter().map(|k| channels_per_hop.iter().map(|&avail| k.min(avail)).collect()).collect()
}

/// Expands per-hop counts into the ordered selection.
fn selection_for(per_hop: &[usize], rankings: &[Vec<ChannelId>]) -> Vec<ChannelId> {
    rankings.iter().zip(per_hop).flat_map(|(ranked, &k)| ranked.iter().take(k).copied()).collect()
}

/// Picks the channel set. `evaluate` returns the image-level validation F1
/// of a candidate selection; the best wins, ties to fewer channels.
pub fn select_channels<F>(
    reports: &[Vec<ChannelScore>],
    config: &DetectorConfig,
    mut evaluate: F,
) -> Result<(Vec<ChannelId>, Vec<SweepEntry>)>
where
    F: FnMut(&[ChannelId]) -> Result<f64>,
{
    if reports.is_empty() || reports.iter().any(Vec::is_empty) {
        return Err(Error::EmptyReport);
    }
    let rankings: Vec<Vec<ChannelId>> = reports.iter().map(|r| rank_channels(r)).collect();
    let avail: Vec<usize> = reports.iter().map(Vec::len).collect();
    let mut sweep = Vec::new();
    let mut best: Option<(f64, Vec<ChannelId>)> = None;
    for per_hop in candidate_counts(config, &avail) {
        let selection = selection_for(&per_hop, &rankings);
        let val_f1 = evaluate(&selection)?;
        sweep.push(SweepEntry { per_hop: per_hop.clone(), n_channels: selection.len(), val_f1 });
        // Candidates arrive in increasing size, so strict > keeps the smaller.
        if best.as_ref().is_none_or(|(f, _)| val_f1 > *f) {
            best = Some((val_f1, selection));
        }
    }
    let (_, selected) = best.ok_or(Error::EmptyReport)?;
    Ok((selected, sweep))
}

/// Concatenates per-block channel scores into image feature vectors.
/// `channel_scores[c][b]` is channel `c` on block `b` (tile-major).
fn assemble_features(channel_scores: &[&[f64]], blocks_per_tile: usize, n_tiles: usize) -> Array2<f64> {
    let n_ch = channel_scores.len();
    Array2::from_shape_fn((n_tiles, blocks_per_tile * n_ch), |(t, j)| {
        channel_scores[j % n_ch][t * blocks_per_tile + j / n_ch]
    })
}

/// Everything `train` produces besides the model itself.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: DetectorModel,
    pub split: DatasetSplit,
    pub test_metrics: Metrics,
    pub val_metrics: Metrics,
    pub fit_reports: Vec<(Hop, FitReport)>,
}

/// Runs the full pipeline on already perturbed tiles. `perturbation` is
/// recorded in the model so evaluation can replay it.
pub fn train(config: &DetectorConfig, tiles: &[Tile], perturbation: Perturbation) -> Result<TrainOutcome> {
    config.validate()?;
    let first = tiles.first().ok_or_else(|| Error::InsufficientData("empty dataset".into()))?;
    let tile_size = (first.height(), first.width());
    if let Some(t) = tiles.iter().find(|t| (t.height(), t.width()) != tile_size) {
        return Err(Error::Shape(format!(
            "tile {} is {}x{}, expected {}x{}",
            t.id,
            t.height(),
            t.width(),
            tile_size.0,
            tile_size.1
        )));
    }
    let split = split_dataset(tiles, config.split, config.seed)?;
    let pick = |idx: &[usize]| idx.iter().map(|&i| &tiles[i]).collect::<Vec<_>>();
    let (train_tiles, val_tiles, test_tiles) = (pick(&split.train), pick(&split.val), pick(&split.test));
    let train_blocks = BlockSet::new(&train_tiles)?;
    let val_blocks = BlockSet::new(&val_tiles)?;
    let bpt = train_blocks.blocks_per_tile;

    let mut hops = Vec::with_capacity(config.hops.len());
    for &hop in &config.hops {
        hops.push(train_channelwise_blocks(&train_blocks, &val_blocks, hop, &config.boost)?);
    }
    let hop_index = |hop: Hop| hops.iter().position(|h| h.hop == hop).expect("trained hop");

    let train_labels: Vec<f64> = train_blocks.tile_labels().iter().map(|&f| f as u8 as f64).collect();
    let val_labels = val_blocks.tile_labels();
    let mut fitted: Vec<(Vec<ChannelId>, StumpEnsemble)> = Vec::new();
    let reports: Vec<Vec<ChannelScore>> = hops.iter().map(|h| h.scores.clone()).collect();
    let (selected, sweep) = select_channels(&reports, config, |selection| {
        let cols = |f: &dyn Fn(&HopTraining) -> &Vec<Vec<f64>>| -> Vec<&[f64]> {
            selection.iter().map(|id| f(&hops[hop_index(id.hop)])[id.channel].as_slice()).collect()
        };
        let x_train = assemble_features(&cols(&|h| &h.train_block_scores), bpt, train_tiles.len());
        let params = config.boost.with_trees(config.boost.n_trees * selection.len());
        let ensemble = fit_stumps(x_train.view(), &train_labels, &params)?;
        let x_val = assemble_features(&cols(&|h| &h.val_block_scores), bpt, val_tiles.len());
        let f1 = Metrics::from_predictions(
            val_labels.iter().copied(),
            scores_of(&ensemble, &x_val).iter().map(|&s| s >= 0.5),
        )
        .f1;
        fitted.push((selection.to_vec(), ensemble));
        Ok(f1)
    })?;
    let ensemble =
        fitted.into_iter().find(|(s, _)| *s == selected).map(|(_, e)| e).expect("selected candidate was fitted");

    let mut channel_report = Vec::new();
    let mut channel_classifiers = Vec::new();
    let mut banks = Vec::new();
    let mut fit_reports = Vec::new();
    for h in hops {
        channel_report.extend(h.scores.iter().cloned());
        for (k, model) in h.classifiers.into_iter().enumerate() {
            let id = ChannelId { hop: h.hop, channel: k };
            if config.retain_all_channels || selected.contains(&id) {
                channel_classifiers.push(ChannelClassifier { id, model });
            }
        }
        banks.push(HopBank { hop: h.hop, bank: h.bank });
        fit_reports.push((h.hop, h.fit_report));
    }
    let model = DetectorModel {
        format_version: FORMAT_VERSION,
        config: config.clone(),
        tile_size,
        perturbation,
        banks,
        channel_classifiers,
        selected,
        ensemble,
        channel_report,
        selection_sweep: sweep,
    };
    let test_metrics = evaluate(&test_tiles, &model)?;
    let val_metrics = evaluate(&val_tiles, &model)?;
    Ok(TrainOutcome { model, split, test_metrics, val_metrics, fit_reports })
}

/// Soft scores of `channels` on one 16x16 window.
pub(crate) fn window_scores(buf: &BlockBuf, model: &DetectorModel, channels: &[ChannelId]) -> Result<Vec<f64>> {
    let mut out = vec![0.0; channels.len()];
    for hb in &model.banks {
        let (slots, ks): (Vec<usize>, Vec<usize>) =
            channels.iter().enumerate().filter(|(_, id)| id.hop == hb.hop).map(|(i, id)| (i, id.channel)).unzip();
        if ks.is_empty() {
            continue;
        }
        let planes = buf.channel_planes(&hb.bank, &ks);
        for ((slot, plane), id) in
            slots.iter().zip(planes).zip(ks.iter().map(|&k| ChannelId { hop: hb.hop, channel: k }))
        {
            let clf = model.classifier(id).ok_or_else(|| Error::MissingChannel(id.to_string()))?;
            out[*slot] = boost::predict_score(clf, &plane)?;
        }
    }
    if let Some(id) = channels.iter().find(|id| model.bank(id.hop).is_none()) {
        return Err(Error::MissingChannel(id.to_string()));
    }
    Ok(out)
}

fn check_tile(tile: &Tile, model: &DetectorModel) -> Result<()> {
    if (tile.height(), tile.width()) != model.tile_size {
        return Err(Error::Shape(format!(
            "tile {} is {}x{}, model was trained on {}x{}",
            tile.id,
            tile.height(),
            tile.width(),
            model.tile_size.0,
            model.tile_size.1
        )));
    }
    Ok(())
}

/// Selected-channel scores per block, `blocks x N_ch`, blocks row-major.
pub fn block_scores(tile: &Tile, model: &DetectorModel) -> Result<Array2<f64>> {
    check_tile(tile, model)?;
    let blocks = tile_blocks(tile)?;
    let n_ch = model.n_channels();
    let mut out = Array2::zeros((blocks.len(), n_ch));
    for (mut row, b) in out.rows_mut().into_iter().zip(&blocks) {
        let s = window_scores(b, model, &model.selected)?;
        row.as_slice_mut().expect("standard layout").copy_from_slice(&s);
    }
    Ok(out)
}

/// Image feature: for each block (row-major), the soft score of each
/// selected channel in selection order.
pub fn image_feature(tile: &Tile, model: &DetectorModel) -> Result<Vec<f64>> {
    Ok(block_scores(tile, model)?.into_iter().collect())
}

/// Image-level score from precomputed block scores.
pub fn ensemble_score(block_scores: &Array2<f64>, model: &DetectorModel) -> Result<f64> {
    let feature: Vec<f64> = block_scores.iter().copied().collect();
    boost::predict_score(&model.ensemble, &feature)
}

pub fn predict(tile: &Tile, model: &DetectorModel) -> Result<(Label, f64)> {
    let score = ensemble_score(&block_scores(tile, model)?, model)?;
    Ok((if score >= 0.5 { Label::Fake } else { Label::Real }, score))
}

pub fn predict_all(tiles: &[&Tile], model: &DetectorModel) -> Result<Vec<(Label, f64)>> {
    par::try_map(tiles, |t| predict(t, model))
}

/// Confusion counts and scores over labelled tiles.
pub fn evaluate(tiles: &[&Tile], model: &DetectorModel) -> Result<Metrics> {
    if let Some(t) = tiles.iter().find(|t| t.label == Label::Unknown) {
        return Err(Error::Invalid(format!("tile {} has no label", t.id)));
    }
    let preds = predict_all(tiles, model)?;
    Ok(Metrics::from_predictions(
        tiles.iter().map(|t| t.label == Label::Fake),
        preds.iter().map(|(l, _)| *l == Label::Fake),
    ))
}

/// Parameter accounting: one parameter per filter, four per stump.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SizeReport {
    pub system: String,
    pub selected_channels: usize,
    pub filter_params: usize,
    pub channelwise_params: usize,
    pub ensemble_params: usize,
    pub total: usize,
}

pub fn model_size_report(model: &DetectorModel) -> SizeReport {
    let hops: Vec<Hop> = model.banks.iter().map(|b| b.hop).collect();
    let filter_params = model.banks.iter().map(|b| b.bank.filter_count()).sum();
    let channelwise_params = model.selected.iter().filter_map(|id| model.classifier(*id)).map(boost::param_count).sum();
    let ensemble_params = boost::param_count(&model.ensemble);
    SizeReport {
        system: hops_label(&hops),
        selected_channels: model.n_channels(),
        filter_params,
        channelwise_params,
        ensemble_params,
        total: filter_params + channelwise_params + ensemble_params,
    }
}

/// Machine-readable training/evaluation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub split: String,
    pub tiles: usize,
    pub perturbation: String,
    pub metrics: Metrics,
    pub model_size: SizeReport,
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn labelled(n_real: usize, n_fake: usize) -> Vec<Tile> {
        (0..n_real + n_fake)
            .map(|i| {
                let label = if i < n_real { Label::Real } else { Label::Fake };
                Tile::new(Array3::from_elem((16, 16, 3), 0.5), label, format!("t{i}")).unwrap()
            })
            .collect()
    }

    #[test]
    fn split_counts_and_stratification() {
        let tiles = labelled(500, 500);
        let s = split_dataset(&tiles, SplitFractions::default(), 3).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (800, 100, 100));
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..1000).collect::<Vec<_>>());
        assert_eq!(s, split_dataset(&tiles, SplitFractions::default(), 3).unwrap());
        assert_ne!(s, split_dataset(&tiles, SplitFractions::default(), 4).unwrap());

        let tiles = labelled(300, 700);
        let s = split_dataset(&tiles, SplitFractions::default(), 3).unwrap();
        for part in [&s.train, &s.val, &s.test] {
            let fakes = part.iter().filter(|&&i| tiles[i].label == Label::Fake).count() as f64;
            assert!((fakes - 0.7 * part.len() as f64).abs() <= 1.0);
        }
    }

    #[test]
    fn split_requires_both_classes() {
        assert!(matches!(split_dataset(&labelled(5, 0), SplitFractions::default(), 0), Err(Error::SingleClass)));
        let bad = SplitFractions { train: 0.8, val: 0.3, test: 0.1 };
        assert!(split_dataset(&labelled(5, 5), bad, 0).is_err());
    }

    #[test]
    fn metric_formulas() {
        let m = Metrics::from_counts(8, 2, 1, 9);
        assert_eq!(m.precision, 0.8);
        assert!((m.recall - 8.0 / 9.0).abs() < 1e-15);
        assert!((m.f1 - 2.0 * 0.8 * (8.0 / 9.0) / (0.8 + 8.0 / 9.0)).abs() < 1e-15);
        let perfect = Metrics::from_counts(5, 0, 0, 5);
        assert_eq!((perfect.precision, perfect.recall, perfect.f1), (1.0, 1.0, 1.0));
        let none = Metrics::from_counts(0, 3, 4, 1);
        assert_eq!(none.f1, 0.0);
        assert_eq!(f1_score(0.0, 0.0), 0.0);
        let json = serde_json::to_value(m).unwrap();
        assert_eq!(json["fn"], 1);
    }

    fn score(channel: usize, f1_val: f64) -> ChannelScore {
        ChannelScore { hop: Hop::B, channel, f1_train: 1.0, f1_val, energy: 0.0 }
    }

    #[test]
    fn dominant_channel_is_selected_alone() {
        let mut report: Vec<ChannelScore> = (0..27).map(|k| score(k, 0.5)).collect();
        report[13].f1_val = 1.0;
        let cfg = DetectorConfig::default();
        // Image-level F1 peaks at k = 1.
        let (sel, sweep) = select_channels(&[report], &cfg, |s| Ok(if s.len() == 1 { 1.0 } else { 0.9 })).unwrap();
        assert_eq!(sel, vec![ChannelId { hop: Hop::B, channel: 13 }]);
        assert_eq!(sweep.iter().map(|e| e.n_channels).collect::<Vec<_>>(), vec![1, 2, 3, 4, 8, 27]);
    }

    #[test]
    fn all_ties_pick_lowest_indices_and_smallest_k() {
        let report: Vec<ChannelScore> = (0..12).map(|k| score(k, 0.7)).collect();
        let (sel, _) = select_channels(std::slice::from_ref(&report), &DetectorConfig::default(), |_| Ok(0.8)).unwrap();
        assert_eq!(sel, vec![ChannelId { hop: Hop::B, channel: 0 }]);
        let (sel, _) =
            select_channels(&[report], &DetectorConfig::default(), |s| Ok(if s.len() == 3 { 0.9 } else { 0.8 }))
                .unwrap();
        assert_eq!(sel.iter().map(|c| c.channel).collect::<Vec<_>>(), vec![0, 1, 2]);
    }

    #[test]
    fn multi_hop_candidates_are_top_one_or_two() {
        let cfg = DetectorConfig { hops: vec![Hop::A, Hop::B, Hop::C], ..DetectorConfig::default() };
        assert_eq!(candidate_counts(&cfg, &[12, 27, 48]), vec![vec![1, 1, 1], vec![2, 2, 2]]);
        let forced = DetectorConfig { channel_grid: vec![ChannelCount::Count(1)], ..cfg.clone() };
        assert_eq!(candidate_counts(&forced, &[12, 27, 48]), vec![vec![1, 1, 1]]);
        let single = DetectorConfig { max_channels_per_hop: 3, ..DetectorConfig::default() };
        assert_eq!(candidate_counts(&single, &[27]), vec![vec![1], vec![2], vec![3]]);
    }

    #[test]
    fn empty_report_is_rejected() {
        assert!(matches!(select_channels(&[], &DetectorConfig::default(), |_| Ok(0.0)), Err(Error::EmptyReport)));
    }

    #[test]
    fn feature_layout_is_block_major() {
        let a = [0.1, 0.2, 0.3, 0.4];
        let b = [1.1, 1.2, 1.3, 1.4];
        // Two tiles of two blocks, two channels.
        let x = assemble_features(&[&a, &b], 2, 2);
        assert_eq!(x.row(0).to_vec(), vec![0.1, 1.1, 0.2, 1.2]);
        assert_eq!(x.row(1).to_vec(), vec![0.3, 1.3, 0.4, 1.4]);
    }

    #[test]
    fn parsing() {
        assert_eq!(parse_hops("A,B,C").unwrap(), vec![Hop::A, Hop::B, Hop::C]);
        assert!(parse_hops("A,A").is_err());
        assert!(parse_hops("D").is_err());
        assert_eq!("B:26".parse::<ChannelId>().unwrap(), ChannelId { hop: Hop::B, channel: 26 });
        assert!("B:27".parse::<ChannelId>().is_err());
        assert_eq!("all".parse::<ChannelCount>().unwrap(), ChannelCount::ALL);
        let grid: Vec<ChannelCount> = serde_json::from_str(r#"[1, "all"]"#).unwrap();
        assert_eq!(grid, vec![ChannelCount::Count(1), ChannelCount::ALL]);
    }

    #[test]
    fn constant_dataset_is_degenerate() {
        let tiles = labelled(4, 4);
        let refs: Vec<&Tile> = tiles.iter().collect();
        assert!(matches!(
            train_channelwise(&refs, &refs, Hop::B, &BoostParams::default()),
            Err(Error::DegenerateInput(_))
        ));
    }
}
