//! Decentralized Scaffnew on a ring, and the lockstep match with the
//! primal-dual SplitSkip formulation.

use proxskip::decentralized::{
    decentralized_optimal_probability, equivalence_check, mixing_matrix, run_decentralized_scaffnew,
    DecentralizedConfig, DecentralizedProbe, Topology,
};
use proxskip::problems::{smoothness_constants, Federation};
use proxskip::record::RunControl;

fn main() -> proxskip::Result<()> {
    let fed = Federation::heterogeneous_quadratic(8, 5, 100.0, 1.0, 3)?;
    for top in [
        Topology::Ring { n: 8 },
        Topology::Star { n: 8 },
        Topology::Complete { n: 8 },
    ] {
        let mixing = mixing_matrix(&top)?;
        let info = smoothness_constants(fed.global())?;
        let gamma = 1.0 / info.l;
        let p = decentralized_optimal_probability(&info, mixing.delta())?;
        let cfg = DecentralizedConfig::full_mixing(gamma, p, 100_000, 0)?;
        let probe = DecentralizedProbe::new(&fed, &mixing)?;
        let control = RunControl::default().with_target(1e-10).with_log_every(u64::MAX);
        let (rec, _) = run_decentralized_scaffnew(&fed, &mixing, &cfg, &[0.0; 5], Some(&probe), &control)?;
        let short = DecentralizedConfig::full_mixing(gamma, p, 200, 0)?;
        let gap = equivalence_check(&fed, &mixing, &short, &[0.0; 5])?;
        println!(
            "{top:?}: delta = {:.4}, p = {p:.3}, {} gossip rounds to 1e-10, SplitSkip deviation {gap:.1e}",
            mixing.delta(),
            rec.last().comm_rounds
        );
    }
    Ok(())
}
