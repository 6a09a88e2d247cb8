#include "requant/commands.hpp"

#include "requant/binary_io.hpp"
#include "requant/errors.hpp"
#include "requant/mlp.hpp"
#include "requant/pipeline.hpp"
#include "requant/pqi.hpp"
#include "requant/rng.hpp"
#include "requant/sensitivity.hpp"

#include <algorithm>
#include <cmath>

namespace requant {

namespace {

struct Reporter {
    const ExperimentConfig& cfg;
    CommandResult& result;
    std::string hash = cfg.hash();

    void write(const std::string& name, const Table& table) {
        const auto path = cfg.out_dir() / name;
        write_text_file(path, table.to_tsv(hash));
        result.outputs.push_back(path);
    }
};

void ensure_out_dir(const ExperimentConfig& cfg) {
    std::error_code ec;
    std::filesystem::create_directories(cfg.out_dir(), ec);
    if (ec) {
        throw ConfigError("cannot create output directory " + cfg.out_dir().string() + ": " + ec.message());
    }
}

std::vector<double> layer_forward(const LayerTensors& t, std::span<const double> x) {
    std::vector<double> y(t.rows);
    for (std::size_t r = 0; r < t.rows; ++r) {
        double acc = t.bias.empty() ? 0.0 : t.bias[r];
        for (std::size_t c = 0; c < t.cols; ++c) {
            acc += t.weights[r * t.cols + c] * x[c];
        }
        y[r] = acc;
    }
    return y;
}

double activate(Activation a, double z) { return a == Activation::relu ? std::max(z, 0.0) : std::tanh(z); }

std::string join(const std::vector<std::size_t>& v) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) {
        out += (i ? "," : "") + std::to_string(v[i]);
    }
    return out;
}

QuantizedModel plain_quantization(const Rig& rig, const QuantConfig& qc) {
    return make_quant_context(rig.spec, rig.weights, rig.calib, qc).quantize(rig.weights);
}

}  // namespace

int exit_code_for(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::config:
        case ErrorKind::parameter:
            return 2;
        case ErrorKind::format:
            return 3;
        case ErrorKind::numerical:
            return 4;
        case ErrorKind::training:
            return 5;
    }
    return 1;
}

Rig build_rig(const ExperimentConfig& cfg) {
    Rig rig;
    rig.spec = cfg.computation_spec();
    const auto n_calib = static_cast<std::size_t>(cfg.get_int("calib_n"));
    const auto n_held = static_cast<std::size_t>(cfg.get_int("heldout_n"));
    if (n_calib == 0) {
        throw ConfigError("calib_n must be >= 1");
    }
    const auto data_seed = derive_seed(cfg.seed(), "data");
    rig.calib = generate_calib(data_seed, n_calib, rig.spec.input_dim, rig.spec.classes, cfg.generator(), 0);
    rig.heldout = generate_calib(data_seed, n_held, rig.spec.input_dim, rig.spec.classes, cfg.generator(), 1);
    rig.train = train(derive_seed(cfg.seed(), "init"), rig.spec, rig.calib, cfg.train_options());
    rig.weights = rig.train.weights;
    return rig;
}

Rig load_rig(const ExperimentConfig& cfg) {
    Rig rig;
    auto ckpt = load_checkpoint(cfg.path_or("checkpoint", "model.rqmd"));
    rig.spec = ckpt.spec;
    rig.weights = std::move(ckpt.weights);
    rig.calib = load_calib(cfg.path_or("calib", "calib.rqcl"));
    rig.heldout = load_calib(cfg.path_or("heldout", "heldout.rqcl"));
    check_compatible(rig.spec, rig.weights, rig.calib);
    check_compatible(rig.spec, rig.weights, rig.heldout);
    return rig;
}

CommandResult cmd_train(const ExperimentConfig& cfg) {
    CommandResult result;
    ensure_out_dir(cfg);
    const Rig rig = build_rig(cfg);
    const auto model_path = cfg.path_or("checkpoint", "model.rqmd");
    const auto calib_path = cfg.path_or("calib", "calib.rqcl");
    const auto held_path = cfg.path_or("heldout", "heldout.rqcl");
    save_checkpoint(model_path, {rig.spec, rig.weights});
    save_calib(calib_path, rig.calib);
    save_calib(held_path, rig.heldout);
    result.outputs = {model_path, calib_path, held_path};

    Table t;
    t.header = {"params", "initial_loss", "final_loss", "calib_loss", "heldout_loss", "calib_error", "heldout_error",
                "grad_inf_norm"};
    t.add({fmt(rig.weights.size()), fmt(rig.train.initial_loss), fmt(rig.train.final_loss),
           fmt(forward_loss(rig.spec, rig.weights, rig.calib)), fmt(forward_loss(rig.spec, rig.weights, rig.heldout)),
           fmt(error_rate(rig.spec, rig.weights, rig.calib)), fmt(error_rate(rig.spec, rig.weights, rig.heldout)),
           fmt(rig.train.grad_inf_norm)});
    Reporter{cfg, result}.write("train.tsv", t);
    return result;
}

CommandResult cmd_quantize(const ExperimentConfig& cfg) {
    CommandResult result;
    ensure_out_dir(cfg);
    const Rig rig = load_rig(cfg);
    const auto qm = plain_quantization(rig, cfg.quant_config());
    const auto path = cfg.path_or("artifact", "quantized.rqqt");
    save_artifact(path, qm);
    result.outputs.push_back(path);

    const auto w_tilde = reconstruct(qm);
    const auto storage = storage_report(qm);
    Table t;
    t.header = {"base_calib_loss", "calib_loss", "heldout_loss", "code_bits", "scale_bits", "overlay_bits",
                "bits_per_weight"};
    t.add({fmt(forward_loss(rig.spec, rig.weights, rig.calib)), fmt(forward_loss(rig.spec, w_tilde, rig.calib)),
           fmt(forward_loss(rig.spec, w_tilde, rig.heldout)), fmt(storage.code_bits), fmt(storage.scale_bits),
           fmt(storage.overlay_bits), fmt(storage.bits_per_weight())});
    Reporter{cfg, result}.write("quantize.tsv", t);
    return result;
}

CommandResult cmd_taylor_study(const ExperimentConfig& cfg) {
    CommandResult result;
    ensure_out_dir(cfg);
    const Rig rig = load_rig(cfg);
    const auto qc = cfg.quant_config();
    const auto sign = cfg.fisher_sign();
    Reporter rep{cfg, result};

    const auto layers = layer_study(rig.spec, rig.weights, rig.calib, qc, sign, &rig.heldout);
    Table t1;
    t1.header = {"scope", "first_order", "second_order", "taylor_sum", "actual_calib", "actual_heldout"};
    for (const auto& r : layers.rows) {
        t1.add({r.scope, fmt(r.first_order), fmt(r.second_order), fmt(r.first_order + r.second_order), fmt(r.actual),
                fmt(r.actual_heldout)});
    }
    rep.write("table1_layers.tsv", t1);

    const auto w_tilde = reconstruct(plain_quantization(rig, qc));
    const auto lambdas = cfg.get_doubles("lambdas");
    const auto lam = lambda_study(rig.spec, rig.weights, w_tilde, rig.calib, lambdas, sign, &rig.heldout);
    Table t2;
    t2.header = {"lambda", "first_order", "second_order", "taylor_sum", "actual_calib", "actual_heldout",
                 "actual_over_first"};
    for (const auto& r : lam.rows) {
        const double ratio = r.first_order != 0.0 ? r.actual / r.first_order : 0.0;
        t2.add({fmt(r.lambda), fmt(r.first_order), fmt(r.second_order), fmt(r.first_order + r.second_order),
                fmt(r.actual), fmt(r.actual_heldout), fmt(ratio)});
    }
    rep.write("table2_lambda.tsv", t2);
    return result;
}

CommandResult cmd_pqi(const ExperimentConfig& cfg) {
    CommandResult result;
    ensure_out_dir(cfg);
    const Rig rig = load_rig(cfg);
    const auto qc = cfg.quant_config();
    const auto opts = cfg.pipeline_options();
    Reporter rep{cfg, result};

    const auto w_tilde = reconstruct(plain_quantization(rig, qc));
    const double actual = forward_loss(rig.spec, w_tilde, rig.calib) - forward_loss(rig.spec, rig.weights, rig.calib);

    Table t4;
    t4.header = {"intervals", "signed_delta_f", "delta_f_pqi_bound", "actual_delta_f", "signed_rel_error"};
    for (std::size_t n : cfg.get_sizes("interval_list")) {
        const auto r = pqi_integral(rig.spec, rig.weights, w_tilde, rig.calib, n, opts.rule);
        const double rel = actual != 0.0 ? std::abs(r.signed_delta_f - actual) / std::abs(actual) : 0.0;
        t4.add({fmt(n), fmt(r.signed_delta_f), fmt(r.delta_f_pqi), fmt(actual), fmt(rel)});
    }
    rep.write("table4_intervals.tsv", t4);

    const auto r = pqi_integral(rig.spec, rig.weights, w_tilde, rig.calib, opts.intervals, opts.rule);
    Table t5;
    t5.header = {"granularity", "label", "count", "sum", "mean"};
    for (const char* g : {"all", "layer", "sublayer", "group"}) {
        for (const auto& row : aggregate(r, rig.weights.layout, parse_granularity(g), qc.group_size)) {
            t5.add({g, row.label, fmt(row.count), fmt(row.sum), fmt(row.mean)});
        }
    }
    rep.write("table5_aggregate.tsv", t5);

    const auto percents = cfg.get_doubles("coverage_percents");
    Table t6;
    t6.header = {"top_percent", "elements", "fraction"};
    for (const auto& p : coverage_curve(r, percents)) {
        const auto k = static_cast<std::size_t>(std::llround(static_cast<double>(rig.weights.size()) * p.top_percent / 100.0));
        t6.add({fmt(p.top_percent), fmt(k), fmt(p.fraction)});
    }
    rep.write("table6_coverage.tsv", t6);
    return result;
}

CommandResult cmd_requant(const ExperimentConfig& cfg) {
    CommandResult result;
    ensure_out_dir(cfg);
    const Rig rig = load_rig(cfg);
    const auto qc = cfg.quant_config();
    const auto opts = cfg.pipeline_options();
    Reporter rep{cfg, result};

    const auto main = run_pipeline(rig.spec, rig.weights, rig.calib, qc, opts, SelectionPolicy::pqi, cfg.seed(),
                                   &rig.heldout);
    const auto path = cfg.path_or("artifact", "requant.rqqt");
    save_artifact(path, main.model);
    result.outputs.push_back(path);

    Table trace;
    trace.header = {"step", "description", "calib_loss", "heldout_loss", "bits_per_weight"};
    for (const auto& s : main.steps) {
        trace.add({std::to_string(s.step), s.description, fmt(s.calib_loss), fmt(s.heldout_loss),
                   fmt(s.bits_per_weight)});
    }
    rep.write("requant_trace.tsv", trace);

    Table search;
    search.header = {"t", "counts", "calib_loss", "chosen"};
    for (const auto& trial : main.plan.trace) {
        search.add({fmt(trial.t), join(trial.counts), fmt(trial.loss), trial.t == main.plan.t ? "1" : "0"});
    }
    rep.write("outlier_search.tsv", search);

    Table detach;
    detach.header = {"pass", "detached", "delta_f_pqi_before", "delta_f_pqi_after", "calib_loss"};
    for (const auto& s : main.detach.steps) {
        detach.add({std::to_string(s.step), fmt(s.detached.size()), fmt(s.delta_f_pqi_before),
                    fmt(s.delta_f_pqi_after), fmt(s.loss_after)});
    }
    rep.write("detach_trace.tsv", detach);

    Table ablation;
    ablation.header = {"variant", "ro", "rs", "beta", "calib_loss", "heldout_loss", "bits_per_weight"};
    auto add_row = [&](const std::string& name, const PipelineResult& pr, const PipelineOptions& o) {
        const auto& last = pr.steps.back();
        ablation.add({name, fmt(o.r_o), fmt(o.r_s), fmt(o.beta), fmt(last.calib_loss), fmt(last.heldout_loss),
                      fmt(last.bits_per_weight)});
    };
    auto variant = [&](double ro, double rs, double beta) {
        PipelineOptions o = opts;
        o.r_o = ro;
        o.r_s = rs;
        o.beta = beta;
        return o;
    };
    {
        const auto o = variant(0.0, 0.0, opts.beta);
        add_row("dense", run_pipeline(rig.spec, rig.weights, rig.calib, qc, o, SelectionPolicy::pqi, cfg.seed(),
                                      &rig.heldout),
                o);
    }
    {
        const auto o = variant(opts.r_o, 0.0, opts.beta);
        add_row("outliers", run_pipeline(rig.spec, rig.weights, rig.calib, qc, o, SelectionPolicy::pqi, cfg.seed(),
                                         &rig.heldout),
                o);
    }
    add_row("outliers+significant", main, opts);
    add_row("random", run_pipeline(rig.spec, rig.weights, rig.calib, qc, opts, SelectionPolicy::random, cfg.seed(),
                                   &rig.heldout),
            opts);
    if (opts.r_s > 0.0) {
        for (int passes : {1, 2, 4}) {
            const auto o = variant(opts.r_o, opts.r_s, opts.r_s / passes);
            add_row("beta_passes_" + std::to_string(passes),
                    run_pipeline(rig.spec, rig.weights, rig.calib, qc, o, SelectionPolicy::pqi, cfg.seed(),
                                 &rig.heldout),
                    o);
        }
    }
    rep.write("table7_ablation.tsv", ablation);
    return result;
}

EvalReport evaluate_artifact(const QuantizedModel& qm, const CalibSet& calib) {
    qm.validate();
    const auto w_tilde = reconstruct(qm);
    check_compatible(qm.spec, w_tilde, calib);
    EvalReport out;
    out.calib_loss = forward_loss(qm.spec, w_tilde, calib);
    out.error_rate = error_rate(qm.spec, w_tilde, calib);
    out.storage = storage_report(qm);

    const auto dense = unflatten(w_tilde);
    for (std::size_t i = 0; i < calib.size(); ++i) {
        std::vector<double> x(calib.sample(i).begin(), calib.sample(i).end());
        for (std::size_t l = 0; l < dense.size(); ++l) {
            const auto y_dense = layer_forward(dense[l], x);
            const auto y_sparse = sparse_matvec(qm, l, x);
            for (std::size_t r = 0; r < y_dense.size(); ++r) {
                out.max_matvec_diff = std::max(out.max_matvec_diff, std::abs(y_dense[r] - y_sparse[r]));
            }
            x = y_dense;
            if (l + 1 < dense.size()) {
                for (auto& v : x) {
                    v = activate(qm.spec.activation, v);
                }
            }
        }
    }
    return out;
}

CommandResult cmd_eval(const ExperimentConfig& cfg) {
    CommandResult result;
    ensure_out_dir(cfg);
    const auto qm = load_artifact(cfg.path_or("artifact", "requant.rqqt"));
    const auto calib = load_calib(cfg.path_or("calib", "calib.rqcl"));
    const auto r = evaluate_artifact(qm, calib);
    constexpr double kMatvecTolerance = 1e-6;
    const bool ok = r.max_matvec_diff <= kMatvecTolerance;
    if (!ok) {
        result.failed_checks.push_back("sparse matvec differs from dense reconstruction by " +
                                       fmt(r.max_matvec_diff));
    }
    Table t;
    t.header = {"calib_loss", "error_rate", "params", "overlay_nonzeros", "code_bits", "scale_bits", "overlay_bits",
                "bits_per_weight", "max_matvec_diff", "matvec_check"};
    t.add({fmt(r.calib_loss), fmt(r.error_rate), fmt(r.storage.params), fmt(r.storage.overlay_nonzeros),
           fmt(r.storage.code_bits), fmt(r.storage.scale_bits), fmt(r.storage.overlay_bits),
           fmt(r.storage.bits_per_weight()), fmt(r.max_matvec_diff), ok ? "pass" : "fail"});
    Reporter{cfg, result}.write("eval.tsv", t);
    return result;
}

}  // namespace requant
