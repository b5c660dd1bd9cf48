use isoshap::dataset::{generate_synthetic, Dataset, SyntheticConfig};
use isoshap::forest::{fit_forest, forest_rmse, ForestConfig};
use isoshap::geo::build_grid;
use isoshap::isoscape::{backward_rmse, fit_gp, forward_rmse, GpSpec, KernelFamily};
use isoshap::selection::{iterative_select, Mode, StopRule};
use isoshap::valuation::{
    tmc_shapley, CachedUtility, ModelKind, ModelUtility, TmcConfig, Utility, UtilitySpec, ValuationResult,
};
use isoshap::Direction;

fn data(n: usize, seed: u64) -> Dataset {
    generate_synthetic(&SyntheticConfig::europe(n, seed)).unwrap().dataset
}

fn utility(train: &Dataset, test: &Dataset, model: ModelKind, direction: Direction) -> ModelUtility {
    let grid = build_grid(&SyntheticConfig::europe(1, 0).bbox, 2.0).unwrap();
    ModelUtility::new(
        train.clone(),
        UtilitySpec {
            model,
            direction,
            test: test.clone(),
            grid: Some(grid),
            prior: None,
        },
    )
    .unwrap()
}

fn gp_kind(train: &Dataset) -> ModelKind {
    ModelKind::Gp(GpSpec::scaled_to(train, KernelFamily::Exponential, 600.0, 0.1).unwrap())
}

#[test]
fn selection_starts_from_the_plain_model_rmse() {
    let (train, test) = (data(30, 1), data(15, 2));
    let gp = gp_kind(&train);
    let ModelKind::Gp(spec) = &gp else { unreachable!() };
    let model = fit_gp(&train, spec).unwrap();

    let u = CachedUtility::new(utility(&train, &test, gp.clone(), Direction::Forward));
    let values = tmc_shapley(&u, &TmcConfig::default()).unwrap();
    let trace = iterative_select(&u, &values, Mode::RemoveLow, StopRule::default()).unwrap();
    let direct = forward_rmse(&model, &test).unwrap();
    assert!((trace.initial_rmse() - direct).abs() < 1e-12);

    let grid = build_grid(&SyntheticConfig::europe(1, 0).bbox, 2.0).unwrap();
    let back = utility(&train, &test, gp, Direction::Backward);
    let direct = backward_rmse(&model, &test, &grid, grid.weights()).unwrap();
    let all: Vec<usize> = (0..train.len()).collect();
    assert!((back.rmse(&all).unwrap() - direct).abs() < 1e-12);
}

#[test]
fn forest_utility_matches_forest_rmse() {
    let (train, test) = (data(40, 3), data(10, 4));
    let cfg = ForestConfig {
        n_trees: 15,
        seed: 9,
        ..Default::default()
    };
    let u = utility(&train, &test, ModelKind::Forest(cfg.clone()), Direction::Forward);
    let model = fit_forest(&train, Direction::Forward, &cfg).unwrap();
    let all: Vec<usize> = (0..train.len()).collect();
    assert!((u.rmse(&all).unwrap() - forest_rmse(&model, &test).unwrap()).abs() < 1e-12);
}

fn values_with_threads(threads: usize, u: &CachedUtility<ModelUtility>) -> ValuationResult {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .unwrap()
        .install(|| {
            tmc_shapley(
                u,
                &TmcConfig {
                    max_permutations: Some(40),
                    seed: 5,
                    ..Default::default()
                },
            )
            .unwrap()
        })
}

#[test]
fn valuation_ignores_thread_count() {
    let (train, test) = (data(20, 6), data(10, 7));
    let fresh = || CachedUtility::new(utility(&train, &test, gp_kind(&train), Direction::Forward));
    let one = values_with_threads(1, &fresh());
    let four = values_with_threads(4, &fresh());
    assert_eq!(serde_json::to_string(&one).unwrap(), serde_json::to_string(&four).unwrap());
}

#[test]
fn forest_ignores_thread_count() {
    let (train, test) = (data(30, 8), data(10, 9));
    let cfg = ForestConfig {
        n_trees: 20,
        seed: 1,
        ..Default::default()
    };
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| forest_rmse(&fit_forest(&train, Direction::Forward, &cfg).unwrap(), &test).unwrap())
    };
    assert_eq!(run(1).to_bits(), run(3).to_bits());
}

/// Adding data does not have to help a GP, so this only logs how often a
/// superset scored worse.
#[test]
fn nested_subset_utility_log() {
    let (train, test) = (data(12, 10), data(10, 11));
    let u = utility(&train, &test, gp_kind(&train), Direction::Forward);
    let mut worse = 0;
    for k in 1..train.len() {
        let small: Vec<usize> = (0..k).collect();
        let big: Vec<usize> = (0..=k).collect();
        if u.evaluate(&big).unwrap() < u.evaluate(&small).unwrap() {
            worse += 1;
        }
    }
    println!("superset scored worse in {worse} of {} nested pairs", train.len() - 1);
}
