#include "mmoe/pipeline.hpp"

#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "mmoe/checkpoint.hpp"
#include "mmoe/moe.hpp"
#include "mmoe/plora.hpp"
#include "mmoe/report.hpp"

namespace mmoe {

namespace fs = std::filesystem;
using nlohmann::json;

ConvertReport convert_command(const std::string& dense_ckpt, const std::string& out_ckpt, int n_experts, int top_k,
                              uint64_t seed, double noise_bias_init, int inputs_per_layer, double abort_above) {
    ModelParams model = load_checkpoint(dense_ckpt);
    if (model.is_moe()) throw ValueError("convert: checkpoint " + dense_ckpt + " is already an MoE model");
    if (n_experts < 2) throw ValueError("convert: n_experts must be >= 2 (an MoE needs multiple experts)");

    // Keep the dense FFNs around for the equivalence check.
    std::vector<DenseFFN> parents;
    for (auto& layer : model.layers) parents.push_back(std::get<DenseFFN>(layer.ffn));
    convert_to_moe(model, n_experts, top_k, seed, noise_bias_init);

    ConvertReport rep;
    rep.n_experts = n_experts;
    rep.top_k = top_k;
    Rng rng(derive_seed(seed, 0xec0c4ecc));
    for (size_t li = 0; li < model.layers.size(); ++li) {
        Tensor x = Tensor::randn({inputs_per_layer, model.config.d_model}, rng, 1.0, false);
        const auto& moe = std::get<MoELayer>(model.layers[li].ffn);
        const double dev = dense_equivalence_check(parents[li], moe.experts, x);
        rep.max_deviation = std::max(rep.max_deviation, dev);
    }
    if (rep.max_deviation > abort_above)
        throw NumericError("convert: summed experts deviate from the dense FFN by " +
                           std::to_string(rep.max_deviation) + " (> " + std::to_string(abort_above) +
                           "); refusing to write " + out_ckpt);
    save_checkpoint(model, out_ckpt);
    return rep;
}

AnalyzeReport analyze_command(const std::string& before_ckpt, const std::string& after_ckpt,
                              const std::string& probe_dataset, const std::string& out_dir, int top_m) {
    ModelParams before = load_checkpoint(before_ckpt);
    ModelParams after = load_checkpoint(after_ckpt);
    if (!before.is_moe() || !after.is_moe()) throw ValueError("analyze: both checkpoints must be MoE models");
    const auto& moe_b = std::get<MoELayer>(before.layers.front().ffn);
    const auto& moe_a = std::get<MoELayer>(after.layers.front().ffn);
    if (moe_b.n_experts() != moe_a.n_experts() || moe_b.router.top_k != moe_a.router.top_k)
        throw ValueError("analyze: checkpoints disagree on N/K");

    Dataset probe = read_dataset(probe_dataset);
    fs::create_directories(out_dir);

    AnalyzeReport rep;
    RoutingTrace tb = collect_trace(before, probe.sequences);
    RoutingTrace ta = collect_trace(after, probe.sequences);
    rep.trace_before_path = join_path(out_dir, "trace_before.rtrc");
    rep.trace_after_path = join_path(out_dir, "trace_after.rtrc");
    write_trace(tb, rep.trace_before_path);
    write_trace(ta, rep.trace_after_path);

    write_eca_csv(tb, join_path(out_dir, "eca_before.csv"));
    write_eca_csv(ta, join_path(out_dir, "eca_after.csv"));
    write_histogram_csv(tb, join_path(out_dir, "hist_before.csv"));
    write_histogram_csv(ta, join_path(out_dir, "hist_after.csv"));

    rep.redundancy = redundancy_delta_report(tb, ta);
    write_redundancy_delta_csv(rep.redundancy, join_path(out_dir, "redundancy_delta.csv"));
    ChartSeries sb{"before", "#1f4e9c", {}}, sa{"after", "#d1752b", {}};
    for (const auto& r : rep.redundancy) {
        sb.ys.push_back(r.before);
        sa.ys.push_back(r.after);
    }
    write_line_chart_svg(join_path(out_dir, "redundancy_delta.svg"), "Average expert co-activation per layer",
                         "layer", "mean ECA", {sb, sa});

    const int m = top_m > 0 ? top_m : moe_a.router.top_k;
    std::ofstream ex(join_path(out_dir, "exclusivity.csv"));
    if (!ex) throw IoError("analyze: cannot open exclusivity.csv");
    ex << "layer,exclusivity\n";
    ex.precision(17);
    for (int layer = 0; layer < ta.n_layers; ++layer) {
        const auto hi = routing_preference_histogram(ta, layer, true);
        const auto ht = routing_preference_histogram(ta, layer, false);
        const double score = exclusivity_score(hi, ht, m);
        ex << layer << "," << score << "\n";
        if (layer == 0) rep.exclusivity_first = score;
        if (layer == ta.n_layers - 1) rep.exclusivity_last = score;
    }
    return rep;
}

namespace {

TrainConfig stage_train_config(const RunConfig& cfg, double lr_max, double lr_min, int epochs, uint64_t seed) {
    TrainConfig tc;
    tc.lr_max = lr_max;
    tc.lr_min = lr_min;
    tc.warmup_steps = cfg.train.warmup_steps;
    tc.beta1 = cfg.train.beta1;
    tc.beta2 = cfg.train.beta2;
    tc.adam_eps = cfg.train.adam_eps;
    tc.weight_decay = cfg.train.weight_decay;
    tc.batch_size = cfg.train.batch_size;
    tc.grad_accum = cfg.train.grad_accum;
    tc.epochs = epochs;
    tc.seed = seed;
    tc.aux_load_balance_weight = cfg.moe.aux_load_balance_weight;
    tc.renormalize_gates = cfg.moe.renormalize_gates;
    return tc;
}

CorpusSpec stage_corpus_spec(const RunConfig& cfg, const StageSpec& stage, uint64_t sample_seed) {
    CorpusSpec spec;
    spec.vocab_text = cfg.model.vocab_text;
    spec.vocab_image = cfg.vocab.vocab_image;
    spec.n_classes = cfg.data.n_classes;
    spec.text_len = cfg.data.text_len;
    spec.image_len = stage.image_len;
    spec.n_samples = stage.n_samples;
    spec.source_seed = cfg.data.source_seed;
    spec.sample_seed = sample_seed;
    return spec;
}

}  // namespace

PipelineSummary run_pipeline(const PipelineOptions& opts) {
    const RunConfig& cfg = opts.config;
    cfg.validate();
    auto log = [&](const std::string& line) {
        if (opts.log) opts.log(line);
    };

    const fs::path root(opts.out_dir);
    for (const char* sub : {"ckpt", "traces", "curves", "reports"}) fs::create_directories(root / sub);
    CheckpointOptions ckpt_opts;
    ckpt_opts.f32_storage = opts.f32_checkpoints;
    const uint64_t seed = cfg.train.seed;
    json summary;
    summary["config"] = json::parse(config_to_json_string(cfg));
    summary["seed"] = seed;

    // data
    log("stage 0: data generation");
    const auto text_pretrain = generate_text_corpus(cfg.model.vocab_text, cfg.data.source_seed, cfg.data.pretrain_len,
                                                    cfg.data.pretrain_samples, derive_seed(seed, 0xd0));
    const auto eval_text = generate_text_corpus(cfg.model.vocab_text, cfg.data.source_seed, cfg.data.eval_text_len,
                                                cfg.data.eval_text_samples, derive_seed(seed, 0xd1));
    const Dataset low_data = generate_corpus(stage_corpus_spec(cfg, cfg.data.low, derive_seed(seed, 0xd2)));
    const Dataset high_data = generate_corpus(stage_corpus_spec(cfg, cfg.data.high, derive_seed(seed, 0xd3)));
    CorpusSpec probe_spec = stage_corpus_spec(cfg, cfg.data.low, derive_seed(seed, 0xd4));
    probe_spec.n_samples = cfg.data.probe_samples;
    const Dataset probe = generate_corpus(probe_spec);
    write_dataset(probe, (root / "reports" / "probe.tokens").string());
    const auto learn = image_learnability(low_data);
    if (!learn.ok())
        throw NumericError("pipeline: corpus failed the learnability floor (conditional " +
                           std::to_string(learn.ppl_conditional) + " vs unconditional " +
                           std::to_string(learn.ppl_unconditional) + ")");
    summary["learnability"] = {{"ppl_conditional", learn.ppl_conditional},
                               {"ppl_unconditional", learn.ppl_unconditional}};

    // text pretraining of the dense model
    log("stage 1: dense text pretraining");
    Rng init_rng(derive_seed(seed, 0x11));
    ModelParams model = init_dense_model(cfg.decoder_config(), init_rng);
    apply_trainable_set(model, TrainableSetKind::DenseAll);
    TrainConfig pre_tc = stage_train_config(cfg, cfg.train.pretrain_lr_max, cfg.train.pretrain_lr_min,
                                            cfg.data.pretrain_epochs, derive_seed(seed, 0x12));
    TrainResult pre_res = train(model, text_pretrain, pre_tc);
    write_curve_csv(pre_res.curve, (root / "curves" / "pretrain.csv").string());
    save_checkpoint(model, (root / "ckpt" / "dense.mmoe").string(), ckpt_opts);
    const double ppl_text_dense = perplexity(model, eval_text, PositionFilter::TextOnly);
    summary["ppl_text_dense"] = ppl_text_dense;

    // conversion, verified against the parent FFNs
    log("stage 2: dense->MoE conversion");
    ConvertReport conv = convert_command((root / "ckpt" / "dense.mmoe").string(), (root / "ckpt" / "moe.mmoe").string(),
                                         cfg.moe.n_experts, cfg.moe.top_k, cfg.moe.partition_seed,
                                         cfg.moe.noise_bias_init);
    {
        std::ofstream eq(root / "reports" / "equivalence.txt");
        eq.precision(17);
        eq << "n_experts " << conv.n_experts << "\ntop_k " << conv.top_k << "\nmax_deviation " << conv.max_deviation
           << "\n";
    }
    summary["convert_max_deviation"] = conv.max_deviation;
    model = load_checkpoint((root / "ckpt" / "moe.mmoe").string());

    // brief text adaptation so routers and experts settle on the old modality
    log("stage 3: MoE text warmup");
    if (cfg.train.moe_warmup_epochs > 0) {
        apply_trainable_set(model, TrainableSetKind::RouterAndExperts);
        TrainConfig warm_tc = stage_train_config(cfg, cfg.train.moe_warmup_lr_max, cfg.train.moe_warmup_lr_min,
                                                 cfg.train.moe_warmup_epochs, derive_seed(seed, 0x13));
        TrainResult warm_res = train(model, text_pretrain, warm_tc);
        write_curve_csv(warm_res.curve, (root / "curves" / "warmup.csv").string());
    }
    save_checkpoint(model, (root / "ckpt" / "warmed.mmoe").string(), ckpt_opts);
    const double ppl_text_base = perplexity(model, eval_text, PositionFilter::TextOnly);
    summary["ppl_text_base"] = ppl_text_base;

    // expansion + initialization
    log("stage 4: vocabulary expansion and initialization (" + cfg.vocab.init_scheme + ")");
    const VocabLayout layout = cfg.vocab_layout();
    const ExpansionReport exp = expand_vocabulary(model, layout);
    summary["added_params_per_matrix"] = exp.added_per_matrix;
    const InitScheme scheme = init_scheme_from_string(cfg.vocab.init_scheme);
    std::vector<std::string> geometry_warnings;
    if (scheme == InitScheme::GW) {
        GeometryOptions gopt;
        gopt.mode = geometry_mode_from_string(cfg.gw.geometry);
        gopt.window = cfg.gw.cooc_window;
        gopt.factor_dim = cfg.gw.factor_dim;
        gopt.codebook_path = cfg.gw.codebook_path;
        gopt.seed = cfg.gw.geometry_seed;
        GwInitInputs gw;
        gw.geometry = image_side_geometry(low_data, gopt, &geometry_warnings);
        gw.solver.epsilon = cfg.gw.epsilon;
        gw.solver.epsilon_scale = cfg.gw.epsilon_scale;
        gw.solver.max_outer = cfg.gw.max_outer;
        gw.solver.max_sinkhorn = cfg.gw.max_sinkhorn;
        gw.solver.tol = cfg.gw.tol;
        gw.max_anchors = cfg.gw.max_anchors;
        gw.anchor_seed = derive_seed(seed, 0x14);
        InitResult init = init_new_rows(model, scheme, &gw, derive_seed(seed, 0x15));
        if (init.embedding_solve) {
            summary["gw_embedding_objective"] = init.embedding_solve->objective;
            write_coupling(init.embedding_solve->coupling, (root / "reports" / "coupling_embedding.txt").string());
        }
        if (init.head_solve) summary["gw_head_objective"] = init.head_solve->objective;
    } else {
        init_new_rows(model, scheme, nullptr, derive_seed(seed, 0x15));
    }
    for (const auto& w : geometry_warnings) log("  geometry: " + w);
    attach_adapters(model, AdapterTargets{cfg.plora.query, cfg.plora.key, cfg.plora.value, cfg.plora.out},
                    cfg.plora.rank, cfg.plora.alpha, cfg.plora.init_seed);
    save_checkpoint(model, (root / "ckpt" / "expanded.mmoe").string(), ckpt_opts);

    // routing snapshot before any multimodal step
    log("stage 5: before-trace on probe set");
    RoutingTrace trace_before = collect_trace(model, probe.sequences);
    write_trace(trace_before, (root / "traces" / "before.rtrc").string());

    // two-stage multimodal fine-tuning
    const TrainMode mode = train_mode_from_string(cfg.train.mode);
    if (mode == TrainMode::LoRA) model.adapter_mode = AdapterMode::AllTokens;
    apply_trainable_set(model, mode == TrainMode::FrozenAdapterOnly ? TrainableSetKind::MultimodalFrozenAdapterOnly
                                                                    : TrainableSetKind::Multimodal);
    auto run_stage = [&](const Dataset& data, const StageSpec& stage, uint64_t stage_seed) {
        log("stage 6: multimodal fine-tuning (" + stage.id + ", " + std::to_string(data.sequences.size()) +
            " sequences)");
        TrainConfig tc = stage_train_config(cfg, cfg.train.lr_max, cfg.train.lr_min, stage.epochs, stage_seed);
        tc.lora_all_tokens = (mode == TrainMode::LoRA);
        TrainHooks hooks;
        hooks.on_epoch_end = [&](int epoch) {
            save_checkpoint(model, (root / "ckpt" / (stage.id + "_epoch" + std::to_string(epoch) + ".mmoe")).string(),
                            ckpt_opts);
        };
        TrainResult res = train(model, data.sequences, tc, hooks);
        write_curve_csv(res.curve, (root / "curves" / ("stage_" + stage.id + ".csv")).string());
        return res;
    };
    run_stage(low_data, cfg.data.low, derive_seed(seed, 0x16));
    save_checkpoint(model, (root / "ckpt" / "stage_low.mmoe").string(), ckpt_opts);
    if (!opts.low_only) {
        run_stage(high_data, cfg.data.high, derive_seed(seed, 0x17));
    }
    save_checkpoint(model, (root / "ckpt" / "final.mmoe").string(), ckpt_opts);

    // evaluation + analytics
    log("stage 7: evaluation and analytics");
    RoutingTrace trace_after = collect_trace(model, probe.sequences);
    write_trace(trace_after, (root / "traces" / "after.rtrc").string());
    const double ppl_text_final = perplexity(model, eval_text, PositionFilter::TextOnly);
    const double ppl_image_final = perplexity(model, probe.sequences, PositionFilter::ImageOnly);
    summary["ppl_text_final"] = ppl_text_final;
    summary["ppl_image_final"] = ppl_image_final;
    summary["dppl_text"] = ppl_text_final - ppl_text_base;
    summary["dppl_text_rel"] = (ppl_text_final - ppl_text_base) / ppl_text_base;

    write_eca_csv(trace_before, (root / "reports" / "eca_before.csv").string());
    write_eca_csv(trace_after, (root / "reports" / "eca_after.csv").string());
    write_histogram_csv(trace_after, (root / "reports" / "hist_after.csv").string());
    const auto redundancy = redundancy_delta_report(trace_before, trace_after);
    write_redundancy_delta_csv(redundancy, (root / "reports" / "redundancy_delta.csv").string());
    ChartSeries sb{"before", "#1f4e9c", {}}, sa{"after", "#d1752b", {}};
    json red = json::array();
    for (const auto& r : redundancy) {
        sb.ys.push_back(r.before);
        sa.ys.push_back(r.after);
        red.push_back({{"layer", r.layer}, {"before", r.before}, {"after", r.after}, {"delta", r.delta}});
    }
    summary["redundancy"] = std::move(red);
    write_line_chart_svg((root / "reports" / "redundancy_delta.svg").string(),
                         "Average expert co-activation per layer", "layer", "mean ECA", {sb, sa});

    const int m = cfg.analytics.top_m > 0 ? cfg.analytics.top_m : cfg.moe.top_k;
    json excl = json::array();
    for (int layer = 0; layer < trace_after.n_layers; ++layer) {
        const auto hi = routing_preference_histogram(trace_after, layer, true);
        const auto ht = routing_preference_histogram(trace_after, layer, false);
        excl.push_back({{"layer", layer}, {"score", exclusivity_score(hi, ht, m)}});
    }
    summary["exclusivity"] = std::move(excl);
    summary["final_model_digest"] = model_digest(model);

    PipelineSummary out;
    out.ppl_text_base = ppl_text_base;
    out.ppl_text_final = ppl_text_final;
    out.ppl_image_final = ppl_image_final;
    out.summary_json = summary.dump(2);
    std::ofstream sf(root / "reports" / "summary.json");
    if (!sf) throw IoError("pipeline: cannot write summary.json");
    sf << out.summary_json << "\n";
    log("pipeline complete: " + (root / "reports" / "summary.json").string());
    return out;
}

}  // namespace mmoe
