//! Cumulative match characteristic (CMC) evaluation over gallery/probe splits.

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{prepare_input, AugmentConfig, ClassId, Dataset};
use crate::error::{Error, Result};
use crate::loss::ImageId;
use crate::nn::{Embedding, Network};

/// Default number of ranks reported.
pub const DEFAULT_MAX_RANK: usize = 30;
/// Default number of random gallery/probe trials averaged.
pub const DEFAULT_TRIALS: usize = 10;

/// One embedding per dataset image, in dataset order, from the deterministic center crop.
pub fn extract_embeddings(
    net: &Network,
    dataset: &Dataset,
    augment: &AugmentConfig,
) -> Result<Vec<Embedding>> {
    let arch = net.config();
    dataset
        .images()
        .par_iter()
        .map(|img| {
            let x = prepare_input::<ChaCha8Rng>(
                &img.pixels,
                arch.input_height,
                arch.input_width,
                augment,
                None,
            )?;
            net.embed(&x)
        })
        .collect()
}

/// Gallery holds one image per person; every other image is a probe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GalleryProbeSplit {
    pub gallery: Vec<ImageId>,
    pub probe: Vec<ImageId>,
}

/// Picks each person's gallery image uniformly at random.
pub fn make_split<R: Rng + ?Sized>(dataset: &Dataset, rng: &mut R) -> GalleryProbeSplit {
    let mut gallery = Vec::with_capacity(dataset.num_classes());
    let mut probe = Vec::with_capacity(dataset.len());
    for class in dataset.class_ids() {
        let members = dataset.members(class);
        if members.len() < 2 {
            warn!(
                "person {:?} has a single image; it joins the gallery only",
                dataset.class_name(class)
            );
        }
        let pick = rng.random_range(0..members.len());
        for (k, &i) in members.iter().enumerate() {
            if k == pick {
                gallery.push(ImageId(i));
            } else {
                probe.push(ImageId(i));
            }
        }
    }
    GalleryProbeSplit { gallery, probe }
}

/// Match rate at ranks `1..=len`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CmcCurve {
    rates: Vec<f64>,
}

/// Rates at the ranks reported in the usual comparison tables.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CmcSummary {
    pub top1: f64,
    pub top5: f64,
    pub top10: f64,
    pub top15: f64,
    pub top20: f64,
    pub top30: f64,
}

impl CmcCurve {
    pub fn from_rates(rates: Vec<f64>) -> Self {
        CmcCurve { rates }
    }

    pub fn rates(&self) -> &[f64] {
        &self.rates
    }

    pub fn max_rank(&self) -> usize {
        self.rates.len()
    }

    /// Rate at a 1-based rank.
    pub fn rate(&self, rank: usize) -> Option<f64> {
        rank.checked_sub(1).and_then(|i| self.rates.get(i)).copied()
    }

    pub fn is_monotone(&self) -> bool {
        self.rates.windows(2).all(|w| w[0] <= w[1])
            && self.rates.iter().all(|r| (0.0..=1.0).contains(r))
    }

    /// Pointwise mean of equally long curves.
    pub fn mean(curves: &[CmcCurve]) -> Result<CmcCurve> {
        let first = curves
            .first()
            .ok_or_else(|| Error::contract("no curves to average"))?;
        if curves.iter().any(|c| c.rates.len() != first.rates.len()) {
            return Err(Error::contract("curves have different lengths"));
        }
        let n = curves.len() as f64;
        let rates = (0..first.rates.len())
            .map(|r| curves.iter().map(|c| c.rates[r]).sum::<f64>() / n)
            .collect();
        Ok(CmcCurve { rates })
    }

    pub fn summary(&self) -> Result<CmcSummary> {
        let at = |r: usize| {
            self.rate(r).ok_or_else(|| {
                Error::contract(format!("curve has {} ranks, summary needs {r}", self.rates.len()))
            })
        };
        Ok(CmcSummary {
            top1: at(1)?,
            top5: at(5)?,
            top10: at(10)?,
            top15: at(15)?,
            top20: at(20)?,
            top30: at(30)?,
        })
    }

    /// `rank,rate` CSV with a header line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("rank,rate\n");
        for (i, r) in self.rates.iter().enumerate() {
            out.push_str(&format!("{},{}\n", i + 1, r));
        }
        out
    }
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// For each probe, ranks the gallery by ascending L2 distance (ties keep gallery order)
/// and records the position of the probe's own person. `curve[r]` is the fraction of
/// probes found within the first `r`.
pub fn cmc(
    embeddings: &[Embedding],
    labels: &[ClassId],
    split: &GalleryProbeSplit,
    max_rank: usize,
) -> Result<CmcCurve> {
    if max_rank == 0 {
        return Err(Error::config("max_rank must be at least 1"));
    }
    let get = |id: ImageId| -> Result<(&[f64], ClassId)> {
        match (embeddings.get(id.0), labels.get(id.0)) {
            (Some(e), Some(&l)) => Ok((e, l)),
            _ => Err(Error::contract(format!("no embedding or label for image {id}"))),
        }
    };
    let gallery: Vec<(&[f64], ClassId)> = split.gallery.iter().map(|&id| get(id)).collect::<Result<_>>()?;

    let mut hits = vec![0usize; max_rank];
    for &p in &split.probe {
        let (pe, pl) = get(p)?;
        let target = gallery
            .iter()
            .position(|(_, l)| *l == pl)
            .ok_or_else(|| Error::contract(format!("probe {p} has no gallery image of its person")))?;
        let d_target = squared_distance(pe, gallery[target].0);
        let ahead = gallery
            .iter()
            .enumerate()
            .filter(|&(j, (ge, _))| {
                let d = squared_distance(pe, ge);
                d < d_target || (d == d_target && j < target)
            })
            .count();
        // 0-based rank `ahead` counts toward every rank > ahead.
        if ahead < max_rank {
            hits[ahead] += 1;
        }
    }

    let n = split.probe.len().max(1) as f64;
    let mut cumulative = 0;
    let rates = hits
        .into_iter()
        .map(|h| {
            cumulative += h;
            cumulative as f64 / n
        })
        .collect();
    Ok(CmcCurve { rates })
}

/// Mean CMC over `trials` random splits. Trial `k` draws its split from stream `k` of `seed`.
pub fn average_trials(
    net: &Network,
    test: &Dataset,
    augment: &AugmentConfig,
    trials: usize,
    max_rank: usize,
    seed: u64,
) -> Result<CmcCurve> {
    let embeddings = extract_embeddings(net, test, augment)?;
    average_trials_on(&embeddings, test, trials, max_rank, seed)
}

/// [`average_trials`] on precomputed embeddings.
pub fn average_trials_on(
    embeddings: &[Embedding],
    test: &Dataset,
    trials: usize,
    max_rank: usize,
    seed: u64,
) -> Result<CmcCurve> {
    if trials == 0 {
        return Err(Error::config("trials must be at least 1"));
    }
    let curves = (0..trials)
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64);
            let split = make_split(test, &mut rng);
            cmc(embeddings, test.labels(), &split, max_rank)
        })
        .collect::<Result<Vec<_>>>()?;
    CmcCurve::mean(&curves)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::LabeledImage;
    use crate::tensor::Tensor;

    fn dataset(persons: usize, per: usize) -> Dataset {
        let images = (0..persons * per)
            .map(|i| LabeledImage {
                pixels: Tensor::full(&[3, 2, 2], 0.5),
                person_id: format!("{:03}", i / per),
                source: "t".into(),
            })
            .collect();
        Dataset::new(images).unwrap()
    }

    #[test]
    fn split_sizes_and_disjointness() {
        let d = dataset(50, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = make_split(&d, &mut rng);
        assert_eq!((s.gallery.len(), s.probe.len()), (50, 150));
        assert!(s.gallery.iter().all(|g| !s.probe.contains(g)));

        let d = dataset(2, 2);
        let s = make_split(&d, &mut rng);
        assert_eq!((s.gallery.len(), s.probe.len()), (2, 2));
    }

    #[test]
    fn single_image_person_is_gallery_only() {
        let mut images = dataset(2, 2).images().to_vec();
        images.push(LabeledImage {
            pixels: Tensor::full(&[3, 2, 2], 0.5),
            person_id: "solo".into(),
            source: "t".into(),
        });
        let d = Dataset::new(images).unwrap();
        let s = make_split(&d, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!((s.gallery.len(), s.probe.len()), (3, 2));
    }

    #[test]
    fn hand_instance_rank_two() {
        // Probe at the origin; gallery distances 0.2 (wrong person), 0.5 (right), 0.9 (wrong).
        let emb = |x: f64| Embedding::from_vec(vec![x]);
        let embeddings = vec![emb(0.0), emb(0.2), emb(0.5), emb(0.9)];
        let labels = vec![ClassId(1), ClassId(0), ClassId(1), ClassId(2)];
        let split = GalleryProbeSplit {
            gallery: vec![ImageId(1), ImageId(2), ImageId(3)],
            probe: vec![ImageId(0)],
        };
        let c = cmc(&embeddings, &labels, &split, 3).unwrap();
        assert_eq!(c.rates(), &[0.0, 1.0, 1.0]);
    }

    #[test]
    fn identical_match_is_rank_one() {
        let embeddings = vec![
            Embedding::from_vec(vec![1.0, 0.0]),
            Embedding::from_vec(vec![0.0, 1.0]),
            Embedding::from_vec(vec![1.0, 0.0]),
        ];
        let labels = vec![ClassId(0), ClassId(1), ClassId(0)];
        let split = GalleryProbeSplit {
            gallery: vec![ImageId(0), ImageId(1)],
            probe: vec![ImageId(2)],
        };
        let c = cmc(&embeddings, &labels, &split, 2).unwrap();
        assert_eq!(c.rates(), &[1.0, 1.0]);
    }

    #[test]
    fn ties_follow_gallery_order() {
        let embeddings = vec![
            Embedding::from_vec(vec![0.0]),
            Embedding::from_vec(vec![1.0]),
            Embedding::from_vec(vec![-1.0]),
        ];
        let labels = vec![ClassId(0), ClassId(1), ClassId(0)];
        let tied_ahead = GalleryProbeSplit {
            gallery: vec![ImageId(1), ImageId(2)],
            probe: vec![ImageId(0)],
        };
        assert_eq!(cmc(&embeddings, &labels, &tied_ahead, 2).unwrap().rates(), &[0.0, 1.0]);
        let tied_behind = GalleryProbeSplit {
            gallery: vec![ImageId(2), ImageId(1)],
            probe: vec![ImageId(0)],
        };
        assert_eq!(cmc(&embeddings, &labels, &tied_behind, 2).unwrap().rates(), &[1.0, 1.0]);
    }

    #[test]
    fn missing_embedding_is_contract_violation() {
        let split = GalleryProbeSplit {
            gallery: vec![ImageId(0)],
            probe: vec![ImageId(5)],
        };
        let err = cmc(&[Embedding::from_vec(vec![0.0])], &[ClassId(0)], &split, 1).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn summary_and_csv() {
        let c = CmcCurve::from_rates((1..=30).map(|r| r as f64 / 30.0).collect());
        let s = c.summary().unwrap();
        assert_eq!(s.top1, 1.0 / 30.0);
        assert_eq!(s.top30, 1.0);
        let json: serde_json::Value = serde_json::to_value(&s).unwrap();
        let mut keys: Vec<_> = json.as_object().unwrap().keys().cloned().collect();
        keys.sort();
        assert_eq!(keys, ["top1", "top10", "top15", "top20", "top30", "top5"]);
        assert!(c.to_csv().starts_with("rank,rate\n1,"));
        assert!(CmcCurve::from_rates(vec![1.0; 10]).summary().is_err());
    }

    #[test]
    fn mean_of_curves() {
        let a = CmcCurve::from_rates(vec![0.0, 0.5, 1.0]);
        let b = CmcCurve::from_rates(vec![0.5, 0.5, 1.0]);
        let m = CmcCurve::mean(&[a.clone(), b]).unwrap();
        assert_eq!(m.rates(), &[0.25, 0.5, 1.0]);
        assert_eq!(CmcCurve::mean(std::slice::from_ref(&a)).unwrap(), a);
        assert!(CmcCurve::mean(&[]).is_err());
    }
}
