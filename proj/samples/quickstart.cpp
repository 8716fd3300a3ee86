// Minimal end-to-end use of the library: simulate a small dataset, train the
// toy model, calibrate its validation dynamics, build difficulty-aware soft
// labels, retrain, and compare video-level calibration error.

#include <iostream>

#include "dyncal/dyncal.hpp"

int main() {
    dyncal::SimConfig sim;
    sim.num_studies = 80;
    sim.seed = 10;

    dyncal::SyntheticDataset dataset = dyncal::simulate_dataset(sim);
    dyncal::ToyTrainResult base = dyncal::train_toy(dataset, nullptr);

    dyncal::LabeledLogits val = dyncal::epoch_averaged_split(base.dynamics, dyncal::Split::val);
    dyncal::DirichletFit fit = dyncal::fit_dirichlet(val);
    dyncal::PseudoLabelSet soft = dyncal::make_pseudo_d(base.dynamics, fit.map);

    dyncal::ToyTrainResult retrained = dyncal::train_toy(dataset, &soft);
    std::vector<dyncal::VideoRow> test = dyncal::split_rows(dataset, dyncal::Split::test);

    dyncal::PredictionSet hard_preds = dyncal::predict_toy(base.model, test);
    dyncal::PredictionSet soft_preds = dyncal::predict_toy(retrained.model, test);
    std::cout << "one-hot   ECE: " << dyncal::balanced_ece(hard_preds) << "\n"
              << "soft-label ECE: " << dyncal::balanced_ece(soft_preds) << "\n";
    return 0;
}
