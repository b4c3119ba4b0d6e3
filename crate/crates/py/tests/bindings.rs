use pyo3::prelude::*;
use pyo3::types::PyDict;

fn run(code: &std::ffi::CStr) {
    Python::initialize();
    Python::attach(|py| {
        let globals = PyDict::new(py);
        globals.set_item("cbt", pyo3::wrap_pymodule!(cbt::cbt)(py)).unwrap();
        py.run(code, Some(&globals), None).unwrap();
    });
}

#[test]
fn loss_anchors_through_python() {
    run(c"
import math
assert cbt.visual_nce_loss([[0.5, 0.5]], [[1.0, 0.0]], [0], [[]]) == 0.0
pool = [[0.0, 0.0]] * 8
l = cbt.visual_nce_loss([[0.3, 0.1]], pool, [0], [list(range(1, 8))])
assert abs(l - math.log(8)) < 1e-12, l
assert abs(cbt.cross_modal_nce_loss([[2.0] * 4] * 4) - math.log(4)) < 1e-12
");
}

#[test]
fn corpus_trainer_round_trip() {
    run(c"
import json
c = cbt.Corpus.generate(json.dumps({'num_sequences': 12, 'seq_len': 6}))
train, test = c.split(0.5)
t = cbt.Trainer(json.dumps({'visual': {'layers': 1}, 'text': {'layers': 1}}), json.dumps({'steps': 2, 'batch_size': 3}))
assert len(t.run(train)) == 2 and t.step_count == 2
assert t.step(train) is None
assert len(t.features(test, 0)) == 6
r = t.probe(train, test, json.dumps({'epochs': 1}))
assert 0.0 <= r['accuracy'] <= 1.0
try:
    cbt.Trainer(json.dumps({'bogus': 1}))
    raise AssertionError('unknown key accepted')
except ValueError:
    pass
");
}
