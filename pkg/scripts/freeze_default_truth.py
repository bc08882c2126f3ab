"""Refit the bundled sleepstudy data and freeze the estimates as the simulation truth."""

import hashlib

from snscore.model import read_long_csv, fit_ml
from snscore.simulate import default_truth_path, sleepstudy_path, truth_to_json


def main():
    path = sleepstudy_path()
    data = read_long_csv(path, "Subject", "Reaction", ["Days"], ["Days"])
    fit = fit_ml(data)
    assert fit.converged, fit.message
    text = truth_to_json(
        fit.theta,
        source="sleepstudy (lme4), Reaction ~ Days + (Days | Subject), marginal ML",
        data_md5=hashlib.md5(path.read_bytes()).hexdigest(),
        loglik=fit.loglik,
        version=1,
    )
    default_truth_path().write_text(text + "\n")
    print(text)


if __name__ == "__main__":
    main()
