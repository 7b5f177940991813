use crate::align::{AlignConfig, AlignMode};
use crate::model::{instance_loss_var, AnyModel, GistModel, Objective, Variant};
use crate::numerics::{finite_diff_check_many, GradCheckReport, DEFAULT_STEP};
use crate::rng::SplitMix64;
use crate::synth::{generate, GenConfig};
use crate::transformer::TransformerDims;
use crate::vanilla::VanillaDims;
use crate::Result;

/// Pass threshold on the worst relative error.
pub const GRADCHECK_TOL: f64 = 1e-4;

/// Full-loss gradient checks of a small model at `points` random points.
///
/// Each point draws a fresh model and instance from `seed`'s child streams;
/// even points use the dot similarity, odd points the rank similarity.
pub fn full_loss_gradcheck(variant: Variant, points: usize, seed: u64) -> Result<Vec<GradCheckReport<f64>>> {
    let vanilla = VanillaDims::uniform(4);
    let transformer = TransformerDims { d_model: 8, heads: 2, layers: 1, d_ff: 16, max_len: 24 };
    let mut master = SplitMix64::new(seed);
    let mut reports = Vec::with_capacity(points);
    for k in 0..points {
        let mut rng = master.fork();
        let model = AnyModel::<f64>::new(variant, vanilla, transformer, &mut rng)?;
        let inst = generate(&GenConfig::new(rng.next_u64(), 1))?.remove(0);
        let mode = if k % 2 == 0 { AlignMode::Dot } else { AlignMode::Rank };
        let objective = Objective { align: Some(AlignConfig { mode, ..AlignConfig::default() }), layer_mask: None };
        let params = model.params().clone();
        let report = finite_diff_check_many(
            |g, vars| {
                let bound = params.bound_from_vars(vars)?;
                Ok(instance_loss_var(&model, g, &bound, &inst, &objective)?.total)
            },
            &params.to_tensors(),
            DEFAULT_STEP,
        )?;
        reports.push(report);
    }
    Ok(reports)
}
