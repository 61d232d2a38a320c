use perfrecon::metrics::rmse;
use perfrecon::phantom::{generate, PhantomSpec};
use perfrecon::prox_nlm::{prox_nlm_pocs, NlmConfig};
use perfrecon::sampler::{adjoint, forward_encode, make_mask, NoiseSpec, Scheme};
use perfrecon::volume::minmax_normalize;

#[test]
fn pocs_beats_zero_filling_at_r4() {
    let ph = generate(&PhantomSpec::dsc_default()).unwrap();
    let (truth, _) = minmax_normalize(&ph.truth).unwrap();
    let d = truth.dims();
    let mask = make_mask(Scheme::Radial, d.nx, d.ny, d.t, 4.0, 1).unwrap();
    let y = forward_encode(&truth, &mask, &NoiseSpec::new(1e-10, 7).unwrap()).unwrap();
    let zf = adjoint(&y);
    let out = prox_nlm_pocs(&y.to_cube(), &mask, &zf.to_cube(), &NlmConfig::default()).unwrap();
    let r_out = rmse(&out.to_series(truth.dt()).unwrap(), &truth).unwrap();
    let r_zf = rmse(&zf, &truth).unwrap();
    assert!(r_out <= r_zf, "{r_out} > {r_zf}");
}
