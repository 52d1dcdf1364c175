//! Shared fixtures for the benchmarks.

use zdp_core::data::{gen_complex_blobs, ComplexDataset};
use zdp_core::nn::{ActivationKind, Architecture, HeadSpec, Network, ParamSet};
use zdp_core::Rng;

/// The two-class blobs task and a 16-unit network over it.
pub fn blobs_fixture(kind: ActivationKind) -> (ComplexDataset, Network, ParamSet) {
    let mut rng = Rng::new(0, 0);
    let data = gen_complex_blobs(200, 2, 8, 6.0, &mut rng).expect("blobs");
    let net = Network::new(Architecture::mlp(8, &[16], 2, kind, HeadSpec::SoftmaxMagnitude)).expect("network");
    let params = net.init_params(&mut rng).expect("init");
    (data, net, params)
}
