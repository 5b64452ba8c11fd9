use std::ffi::CString;

use pyo3::prelude::*;
use pyo3::types::PyDict;

fn run(code: &str) {
    Python::attach(|py| {
        let module = pyo3::wrap_pymodule!(rgflow::rgflow)(py);
        let globals = PyDict::new(py);
        globals.set_item("rgflow", module).unwrap();
        let code = CString::new(code).unwrap();
        if let Err(e) = py.run(&code, Some(&globals), None) {
            e.print(py);
            panic!("python snippet failed");
        }
    });
}

#[test]
fn lattice_queries() {
    run(r#"
s = rgflow.LatticeSpec(32, 4, 3)
assert s.num_levels == 4 and s.dim == 3072
assert sum(s.latent_counts()) == 3072
slots, levels = s.inference_cone(11, 11, 10, 10)
assert len(slots) == sum(levels) == 1344
assert s.latent_index(s.flat_index(1, 2, 3, 0)) == (1, 2, 3, 0)
h, i, j, c = s.latent_index(0)
assert len(s.generation_cone(h, i, j, c)) > 0
try:
    rgflow.LatticeSpec(30, 4, 3)
    raise AssertionError("accepted a bad size")
except ValueError:
    pass
"#);
}

#[test]
fn model_round_trip() {
    run(r#"
m = rgflow.Model(size=8, kernel=4, channels=1, hidden=8, n_layer=[2], n_res=1, seed=3)
m.randomize(4, 0.05)
x8 = [[(7 * i + 13 * k) % 256 for i in range(64)] for k in range(3)]
x, ld = rgflow.preprocess(x8)
assert [list(r) for r in rgflow.postprocess(x)] == x8
z, logdet = m.encode(x)
back, _ = m.decode(z)
assert max(abs(a - b) for r, q in zip(x, back) for a, b in zip(r, q)) < 1e-3
lp = m.log_prob(x)
assert len(lp) == 3 and all(v == v for v in lp)
bpd = rgflow.bits_per_dim(lp[0], ld[0], 64)
assert bpd > 0
assert len(m.sample(2, 0.8, 1)) == 2
mixed = rgflow.mix(m, x[:1], x[1:2], 0)
assert [list(r) for r in rgflow.postprocess(mixed)] == x8[:1]
rf, strength = rgflow.receptive_field(m, *m.spec.latent_index(5), 2, 0)
assert len(rf) == 8 and strength > 0
"#);
}

#[test]
fn data_helpers() {
    run(r#"
a = rgflow.gen_msds(3, 1, 5)
b = rgflow.gen_msds(1, 1, 5, 2)
assert len(a[0]) == 3072 and a[2] == b[0]
pts, labels = rgflow.gen_pinwheel(40, 1)
assert len(pts) == 40 and sorted(set(labels)) == [0, 1, 2, 3]
assert rgflow.psnr([0.5], [0.5]) == 100.0
assert rgflow.quadrant_purity([[1, 1], [-1, 1]], [0, 1], "signs") == 1.0
assert rgflow.quadrant_purity([[2, 0.1], [2, -0.1]], [0, 0]) == 1.0
"#);
}
