"""Random hyperparameter search with a JSON-lines trial log."""

import json

import fedhar.data as D
from fedhar.training import SearchSpace, random_search

spec = D.SyntheticSpec(n_subjects=4, minutes_per_subject=200, n_features=8,
                       n_labels=3, alpha=0.3, noise_std=0.5, seed=9)
records = D.gen_synthetic(spec)
st = D.fit_standardizer(records)
standardized = [D.apply_standardizer(r, st) for r in records]

# a narrowed space so the demo finishes in seconds; the default SearchSpace
# covers layers up to 12 and hidden up to 768
space = SearchSpace(layers_choices=(1, 2), hidden_choices=(8, 16, 32),
                    n_positions_choices=(8, 16), lr_low=1e-4, lr_high=1e-2)

log_lines = []
best, trials = random_search(space, budget=6, records=standardized, seed=0,
                             epochs=8, batch_size=8,
                             on_trial=lambda t: log_lines.append(t.to_json_dict()))

for line in log_lines:
    print(json.dumps(line))

print()
print("best: trial %d, val mean BA %.4f" % (best.index, best.val_mean_ba))
print("      params %s" % best.params)

# the full default grid, for reference
full = SearchSpace()
print("default grid: layers %s hidden %s positions %s lr [%g, %g] log-uniform"
      % (full.layers_choices, full.hidden_choices, full.n_positions_choices,
         full.lr_low, full.lr_high))
