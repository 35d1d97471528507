mod common;

use common::{random_mask, rng};
use proptest::prelude::*;
use simseg::decoder::{DecoderConfig, PredictedMask};
use simseg::metrics::{quality, MaskPair};
use simseg::raster::BinaryMask;
use simseg::rvls2m::{rvls2m, RegionMask, TauStrategy};
use simseg::synthdata::{generate, label_vocabulary, SceneSpec};
use simseg::toy::{ToyModel, ToyModelConfig};
use simseg::tts::*;

fn region(bits: BinaryMask) -> RegionMask {
    RegionMask::new(bits).unwrap()
}

/// Dilation then flips, spelled out cell by cell.
fn perturb_oracle(src: &BinaryMask, params: &PerturbationParams) -> BinaryMask {
    let g = src.height() as i64;
    let mut out = src.clone();
    if params.radius == 1 {
        for r in 0..g {
            for c in 0..g {
                let any = (-1..=1).any(|dr| {
                    (-1..=1).any(|dc| {
                        let (rr, cc) = (r + dr, c + dc);
                        (0..g).contains(&rr) && (0..g).contains(&cc) && src.get(rr as usize, cc as usize)
                    })
                });
                out.set(r as usize, c as usize, any);
            }
        }
    }
    let mut rng = simseg::seed::rng(params.seed);
    let cells = rand::seq::index::sample(&mut rng, (g * g) as usize, params.flips);
    for cell in cells {
        let b = out.bits()[cell];
        out.bits_mut()[cell] = !b;
    }
    out
}

#[test]
fn perturbation_matches_stepwise_oracle() {
    let family = PerturbationFamily { flip_max: 6, dilate_prob: 0.5 };
    for j in 0..200 {
        let g = 1 + j % 9;
        let src = random_mask(&mut rng(j as u64), g, g, 0.2);
        let params = family.draw(42, j, g);
        assert!(params.flips <= 6.min(g * g) && params.radius <= 1);
        let got = perturb(&region(src.clone()), &params).unwrap();
        assert_eq!(got.mask(), &perturb_oracle(&src, &params));
    }
    let src = random_mask(&mut rng(1), 5, 5, 0.5);
    assert_eq!(perturb(&region(src.clone()), &PerturbationParams::identity()).unwrap().mask(), &src);
    let too_many = PerturbationParams { flips: 26, radius: 0, seed: 0 };
    assert!(perturb(&region(src), &too_many).is_err());
}

#[test]
fn draws_are_shared_across_callers() {
    let family = PerturbationFamily::default();
    for j in 0..20 {
        assert_eq!(family.draw(9, j, 16), family.draw(9, j, 16));
    }
    assert_ne!(
        (0..20).map(|j| family.draw(9, j, 16)).collect::<Vec<_>>(),
        (0..20).map(|j| family.draw(10, j, 16)).collect::<Vec<_>>()
    );
    assert!(PerturbationFamily { flip_max: 1, dilate_prob: 1.5 }.validate().is_err());
}

fn hand_set(masks: &[Vec<BinaryMask>]) -> CandidateSet {
    let candidates = masks
        .iter()
        .enumerate()
        .flat_map(|(i, row)| {
            row.iter().enumerate().map(move |(j, m)| Candidate {
                path: i,
                perturbation: j,
                params: PerturbationParams::identity(),
                mask: PredictedMask::from_mask(m.clone()),
            })
        })
        .collect();
    CandidateSet { m: masks.len(), n: masks[0].len(), candidates }
}

#[test]
fn selection_equals_brute_force_on_two_by_three() {
    for seed in 0..300u64 {
        let mut r = rng(seed);
        // Tiny masks make ties common.
        let masks: Vec<Vec<BinaryMask>> =
            (0..2).map(|_| (0..3).map(|_| random_mask(&mut r, 2, 2, 0.5)).collect()).collect();
        let gt = random_mask(&mut r, 2, 2, 0.5);
        let set = hand_set(&masks);
        let sel = select(&set, &SelectionMode::Oracle(gt.clone())).unwrap();
        let mut best = (f64::NEG_INFINITY, 0, 0);
        for i in 0..2 {
            for j in 0..3 {
                let q = quality(&MaskPair::new(&masks[i][j], &gt).unwrap());
                if q > best.0 {
                    best = (q, i, j);
                }
            }
        }
        assert_eq!((sel.score, sel.path, sel.perturbation), best, "seed {seed}");
        assert_eq!(sel.mask.mask(), &masks[best.1][best.2]);
    }
}

#[test]
fn reference_free_scores_against_the_strict_majority() {
    let rows = |r: &[&str]| BinaryMask::from_row_strings(r).unwrap();
    let masks = vec![vec![rows(&["11"]), rows(&["10"])], vec![rows(&["10"]), rows(&["01"])]];
    // Column 0 has 3 of 4 votes, column 1 has 2 of 4: majority "10".
    let sel = select(&hand_set(&masks), &SelectionMode::ReferenceFree).unwrap();
    assert_eq!((sel.path, sel.perturbation, sel.score), (0, 1, 1.0));
}

#[test]
fn planted_truth_is_selected_by_the_oracle() {
    let mut r = rng(3);
    let masks: Vec<Vec<BinaryMask>> =
        (0..3).map(|_| (0..2).map(|_| random_mask(&mut r, 6, 6, 0.5)).collect()).collect();
    let gt = random_mask(&mut r, 6, 6, 0.3);
    let mut set = hand_set(&masks);
    set.plant(gt.clone());
    let sel = select(&set, &SelectionMode::Oracle(gt.clone())).unwrap();
    assert_eq!((sel.path, sel.score), (3, 1.0));
    assert_eq!(sel.mask.mask(), &gt);
}

struct Fixture {
    model: ToyModel,
    paths: Vec<simseg::toy::ReasoningPath>,
    regions: Vec<RegionMask>,
    feats: simseg::decoder::VisualFeatures,
}

fn fixture(m: usize) -> Fixture {
    let sample = generate(&SceneSpec { height: 32, width: 32, seed: 4, ..SceneSpec::default() }, 1)
        .unwrap()
        .remove(0);
    let model = ToyModel::new(ToyModelConfig::default()).unwrap();
    let paths = sample_paths(&model, &sample.image, &sample.query, m, 77, 0.3).unwrap();
    let tokens = model.encode(&sample.image).unwrap();
    let regions = paths
        .iter()
        .map(|p| rvls2m(&tokens, &p.seg_raw, model.head(), 8, TauStrategy::TopK(10)).unwrap())
        .collect();
    let feats = model.features(&sample.image);
    Fixture { model, paths, regions, feats }
}

fn candidates(f: &Fixture, n: usize) -> CandidateSet {
    generate_candidates(
        &f.paths,
        n,
        &f.regions,
        &f.feats,
        f.model.head(),
        &DecoderConfig::default(),
        &PerturbationFamily::default(),
        5,
    )
    .unwrap()
}

#[test]
fn candidates_do_not_depend_on_thread_count() {
    let f = fixture(4);
    let pool = |t| rayon::ThreadPoolBuilder::new().num_threads(t).build().unwrap();
    let one = pool(1).install(|| candidates(&f, 4));
    let four = pool(4).install(|| candidates(&f, 4));
    assert_eq!(one.len(), 16);
    for (a, b) in one.candidates.iter().zip(&four.candidates) {
        assert_eq!((a.path, a.perturbation, &a.params), (b.path, b.perturbation, &b.params));
        assert_eq!(a.mask, b.mask);
    }
}

#[test]
fn larger_sets_contain_smaller_ones() {
    let f = fixture(3);
    let small = candidates(&Fixture { paths: f.paths[..2].to_vec(), regions: f.regions[..2].to_vec(), ..fixture(3) }, 2);
    let big = candidates(&f, 4);
    for c in &small.candidates {
        let same = big
            .candidates
            .iter()
            .find(|d| (d.path, d.perturbation) == (c.path, c.perturbation))
            .unwrap();
        assert_eq!(same.mask, c.mask);
    }
    let gt = random_mask(&mut rng(8), 32, 32, 0.2);
    let mode = SelectionMode::Oracle(gt);
    assert!(select(&big, &mode).unwrap().score >= select(&small, &mode).unwrap().score);
}

#[test]
fn paths_are_seeded_per_index() {
    let f = fixture(4);
    let again = fixture(2);
    assert_eq!(f.paths[..2], again.paths[..]);
    assert!(majority_diagnosis(&f.paths, &label_vocabulary()).is_some());
    let model = &f.model;
    let img = simseg::raster::GrayImage::filled(8, 8, 0.3).unwrap();
    assert!(sample_paths(model, &img, "q", 0, 0, 0.0).is_err());
    assert!(sample_paths(model, &img, "  ", 1, 0, 0.0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn oracle_score_never_drops_when_candidates_are_added(seed in any::<u64>(), m in 1usize..4, n in 1usize..4) {
        let mut r = rng(seed);
        let masks: Vec<Vec<BinaryMask>> =
            (0..m + 1).map(|_| (0..n + 1).map(|_| random_mask(&mut r, 5, 5, 0.4)).collect()).collect();
        let gt = random_mask(&mut r, 5, 5, 0.4);
        let sub: Vec<Vec<BinaryMask>> = masks[..m].iter().map(|row| row[..n].to_vec()).collect();
        let mode = SelectionMode::Oracle(gt);
        prop_assert!(select(&hand_set(&masks), &mode).unwrap().score >= select(&hand_set(&sub), &mode).unwrap().score);
    }
}
