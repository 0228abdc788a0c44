// Command-line front end for the whole toolkit: data generation, dense text
// pretraining, dense->MoE conversion, vocabulary expansion and
// initialization, multimodal fine-tuning, evaluation, routing analytics,
// generation, the comparison matrix, and the end-to-end pipeline.

#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "mmoe/checkpoint.hpp"
#include "mmoe/config.hpp"
#include "mmoe/moe.hpp"
#include "mmoe/pipeline.hpp"
#include "mmoe/plora.hpp"
#include "mmoe/train.hpp"

namespace fs = std::filesystem;
using namespace mmoe;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitNumeric = 3;
constexpr int kExitIo = 4;

struct ConfigArgs {
    std::string preset = "desk";
    std::string config_path;

    RunConfig resolve() const {
        RunConfig cfg = preset_by_name(preset);
        if (!config_path.empty()) cfg = load_config_file(config_path);
        cfg.validate();
        return cfg;
    }
};

void add_config_flags(CLI::App* cmd, ConfigArgs& args) {
    cmd->add_option("--preset", args.preset, "Built-in preset: desk | paper-7b")->capture_default_str();
    cmd->add_option("--config", args.config_path, "JSON config file (overrides the preset entirely)");
}

TrainConfig train_config_from(const RunConfig& cfg, int epochs) {
    TrainConfig tc;
    tc.lr_max = cfg.train.lr_max;
    tc.lr_min = cfg.train.lr_min;
    tc.warmup_steps = cfg.train.warmup_steps;
    tc.beta1 = cfg.train.beta1;
    tc.beta2 = cfg.train.beta2;
    tc.adam_eps = cfg.train.adam_eps;
    tc.weight_decay = cfg.train.weight_decay;
    tc.batch_size = cfg.train.batch_size;
    tc.grad_accum = cfg.train.grad_accum;
    tc.epochs = epochs;
    tc.seed = cfg.train.seed;
    tc.aux_load_balance_weight = cfg.moe.aux_load_balance_weight;
    tc.renormalize_gates = cfg.moe.renormalize_gates;
    return tc;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Multimodal MoE toolkit: extend a dense text decoder to a second token modality"};
    app.require_subcommand(1);

    // --- gen-data ---------------------------------------------------------
    auto* gen_data = app.add_subcommand("gen-data", "Generate a two-modality corpus file");
    ConfigArgs gd_cfg;
    std::string gd_out = "corpus.tokens";
    int64_t gd_samples = -1;
    int gd_image_len = -1;
    uint64_t gd_seed = 1;
    add_config_flags(gen_data, gd_cfg);
    gen_data->add_option("--out", gd_out, "Output token file")->capture_default_str();
    gen_data->add_option("--samples", gd_samples, "Sample count (default: low-stage count)");
    gen_data->add_option("--image-len", gd_image_len, "New-modality block length (default: low-stage)");
    gen_data->add_option("--sample-seed", gd_seed, "Sampling seed")->capture_default_str();

    // --- pretrain ---------------------------------------------------------
    auto* pretrain = app.add_subcommand("pretrain", "Train the dense text model from scratch");
    ConfigArgs pt_cfg;
    std::string pt_out = "dense.mmoe";
    std::string pt_curve;
    add_config_flags(pretrain, pt_cfg);
    pretrain->add_option("--out", pt_out, "Output checkpoint")->capture_default_str();
    pretrain->add_option("--curve", pt_curve, "Loss curve CSV path");

    // --- convert ----------------------------------------------------------
    auto* convert = app.add_subcommand("convert", "Split dense FFNs into MoE experts (verified)");
    ConfigArgs cv_cfg;
    std::string cv_in, cv_out = "moe.mmoe";
    int cv_experts = -1, cv_topk = -1;
    uint64_t cv_seed = 0;
    add_config_flags(convert, cv_cfg);
    convert->add_option("--in", cv_in, "Dense checkpoint")->required();
    convert->add_option("--out", cv_out, "MoE checkpoint")->capture_default_str();
    convert->add_option("--experts", cv_experts, "Expert count N (default: config)");
    convert->add_option("--top-k", cv_topk, "Active experts K (default: config)");
    auto* cv_seed_opt = convert->add_option("--seed", cv_seed, "Partition seed (default: config)");

    // --- expand-vocab -----------------------------------------------------
    auto* expand = app.add_subcommand("expand-vocab", "Append new-modality rows to embedding and head");
    ConfigArgs ex_cfg;
    std::string ex_in, ex_out = "expanded.mmoe";
    add_config_flags(expand, ex_cfg);
    expand->add_option("--in", ex_in, "Input checkpoint")->required();
    expand->add_option("--out", ex_out, "Output checkpoint")->capture_default_str();

    // --- init-embeds ------------------------------------------------------
    auto* init_cmd = app.add_subcommand("init-embeds", "Initialize the appended embedding/head rows");
    ConfigArgs in_cfg;
    std::string in_in, in_out = "initialized.mmoe", in_scheme = "gw", in_corpus, in_coupling;
    add_config_flags(init_cmd, in_cfg);
    init_cmd->add_option("--in", in_in, "Expanded checkpoint")->required();
    init_cmd->add_option("--out", in_out, "Output checkpoint")->capture_default_str();
    init_cmd->add_option("--scheme", in_scheme, "random | mean | gw")->capture_default_str();
    init_cmd->add_option("--corpus", in_corpus, "Corpus file for gw co-occurrence geometry");
    init_cmd->add_option("--export-coupling", in_coupling, "Write the embedding coupling to this path");

    // --- train ------------------------------------------------------------
    auto* train_cmd = app.add_subcommand("train", "Multimodal fine-tuning of an adapted checkpoint");
    ConfigArgs tr_cfg;
    std::string tr_in, tr_out = "trained.mmoe", tr_mode, tr_corpus, tr_curve;
    int tr_epochs = -1;
    add_config_flags(train_cmd, tr_cfg);
    train_cmd->add_option("--in", tr_in, "Initialized checkpoint (adapters attached on the fly if absent)")
        ->required();
    train_cmd->add_option("--out", tr_out, "Output checkpoint")->capture_default_str();
    train_cmd->add_option("--mode", tr_mode, "plora | lora | frozen-adapter-only (default: config)");
    train_cmd->add_option("--corpus", tr_corpus, "Training corpus file (default: generated low stage)");
    train_cmd->add_option("--epochs", tr_epochs, "Epochs (default: low-stage epochs)");
    train_cmd->add_option("--curve", tr_curve, "Loss curve CSV path");

    // --- eval -------------------------------------------------------------
    auto* eval_cmd = app.add_subcommand("eval", "Perplexity of a checkpoint");
    ConfigArgs ev_cfg;
    std::string ev_in, ev_filter = "all", ev_corpus;
    add_config_flags(eval_cmd, ev_cfg);
    eval_cmd->add_option("--in", ev_in, "Checkpoint")->required();
    eval_cmd->add_option("--filter", ev_filter, "text | image | all")->capture_default_str();
    eval_cmd->add_option("--corpus", ev_corpus, "Evaluation corpus file (default: generated)");

    // --- analyze ----------------------------------------------------------
    auto* analyze = app.add_subcommand("analyze", "Routing analytics between two checkpoints");
    ConfigArgs an_cfg;
    std::string an_before, an_after, an_probe, an_out = "analysis";
    int an_topm = 0;
    add_config_flags(analyze, an_cfg);
    analyze->add_option("--before", an_before, "Checkpoint before fine-tuning")->required();
    analyze->add_option("--after", an_after, "Checkpoint after fine-tuning")->required();
    analyze->add_option("--probe", an_probe, "Probe dataset file (default: generated)");
    analyze->add_option("--out", an_out, "Output directory")->capture_default_str();
    analyze->add_option("--top-m", an_topm, "Exclusivity set size (default: K)");

    // --- generate ---------------------------------------------------------
    auto* gen = app.add_subcommand("generate", "Autoregressive continuation from a prompt");
    ConfigArgs g_cfg;
    std::string g_in, g_prompt;
    int g_max_new = 32, g_topk = 0;
    double g_temp = 0.0;
    uint64_t g_seed = 1;
    bool g_stop_eoi = false;
    add_config_flags(gen, g_cfg);
    gen->add_option("--in", g_in, "Checkpoint")->required();
    gen->add_option("--prompt", g_prompt, "Space-separated prompt token ids")->required();
    gen->add_option("--max-new", g_max_new, "Max new tokens")->capture_default_str();
    gen->add_option("--temperature", g_temp, "0 = greedy")->capture_default_str();
    gen->add_option("--top-k", g_topk, "Top-k truncation (0 = off)")->capture_default_str();
    gen->add_option("--seed", g_seed, "Sampling seed")->capture_default_str();
    gen->add_flag("--stop-at-eoi", g_stop_eoi, "Stop at the block-end marker");

    // --- matrix -----------------------------------------------------------
    auto* matrix = app.add_subcommand("matrix", "LoRA-vs-PLoRA × init-scheme comparison matrix");
    ConfigArgs mx_cfg;
    std::string mx_base, mx_out = "matrix";
    std::vector<uint64_t> mx_seeds = {1, 2, 3};
    int mx_epochs = -1, mx_jobs = 1;
    add_config_flags(matrix, mx_cfg);
    matrix->add_option("--base", mx_base, "Base MoE checkpoint (text-adapted)")->required();
    matrix->add_option("--out", mx_out, "Output directory")->capture_default_str();
    matrix->add_option("--seeds", mx_seeds, "Seeds (>= 2)")->capture_default_str();
    matrix->add_option("--epochs", mx_epochs, "Epochs per cell (default: low-stage epochs)");
    matrix->add_option("--jobs", mx_jobs, "Parallel cells")->capture_default_str();

    // --- pipeline ---------------------------------------------------------
    auto* pipe = app.add_subcommand("pipeline", "Full pipeline: pretrain, convert, expand, init, train, analyze");
    ConfigArgs pl_cfg;
    std::string pl_out = "artifacts";
    std::string pl_stage = "full";
    bool pl_f32 = false;
    add_config_flags(pipe, pl_cfg);
    pipe->add_option("--out", pl_out, "Artifacts directory")->capture_default_str();
    pipe->add_option("--stage", pl_stage, "full | low-only")->capture_default_str();
    pipe->add_flag("--f32", pl_f32, "Store checkpoints in 32-bit");

    // --- print-config -----------------------------------------------------
    auto* pc = app.add_subcommand("print-config", "Print the resolved configuration");
    ConfigArgs pc_cfg;
    add_config_flags(pc, pc_cfg);

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen_data->parsed()) {
            RunConfig cfg = gd_cfg.resolve();
            CorpusSpec spec;
            spec.vocab_text = cfg.model.vocab_text;
            spec.vocab_image = cfg.vocab.vocab_image;
            spec.n_classes = cfg.data.n_classes;
            spec.text_len = cfg.data.text_len;
            spec.image_len = gd_image_len > 0 ? gd_image_len : cfg.data.low.image_len;
            spec.n_samples = gd_samples >= 0 ? gd_samples : cfg.data.low.n_samples;
            spec.source_seed = cfg.data.source_seed;
            spec.sample_seed = gd_seed;
            Dataset data = generate_corpus(spec);
            const auto learn = image_learnability(data);
            write_dataset(data, gd_out);
            std::cout << "wrote " << data.sequences.size() << " sequences to " << gd_out
                      << " (bigram ppl conditional " << learn.ppl_conditional << " vs unconditional "
                      << learn.ppl_unconditional << ")\n";
        } else if (pretrain->parsed()) {
            RunConfig cfg = pt_cfg.resolve();
            const auto corpus = generate_text_corpus(cfg.model.vocab_text, cfg.data.source_seed, cfg.data.pretrain_len,
                                                     cfg.data.pretrain_samples, derive_seed(cfg.train.seed, 0xd0));
            Rng rng(derive_seed(cfg.train.seed, 0x11));
            ModelParams model = init_dense_model(cfg.decoder_config(), rng);
            apply_trainable_set(model, TrainableSetKind::DenseAll);
            TrainConfig tc = train_config_from(cfg, cfg.data.pretrain_epochs);
            tc.lr_max = cfg.train.pretrain_lr_max;
            tc.lr_min = cfg.train.pretrain_lr_min;
            tc.seed = derive_seed(cfg.train.seed, 0x12);
            TrainResult res = train(model, corpus, tc);
            if (!pt_curve.empty()) write_curve_csv(res.curve, pt_curve);
            save_checkpoint(model, pt_out);
            const auto eval_text = generate_text_corpus(cfg.model.vocab_text, cfg.data.source_seed,
                                                        cfg.data.eval_text_len, cfg.data.eval_text_samples,
                                                        derive_seed(cfg.train.seed, 0xd1));
            std::cout << "pretrained " << res.steps << " steps; text ppl "
                      << perplexity(model, eval_text, PositionFilter::TextOnly) << "; wrote " << pt_out << "\n";
        } else if (convert->parsed()) {
            RunConfig cfg = cv_cfg.resolve();
            const int n = cv_experts > 0 ? cv_experts : cfg.moe.n_experts;
            const int k = cv_topk > 0 ? cv_topk : cfg.moe.top_k;
            const uint64_t seed = cv_seed_opt->count() ? cv_seed : cfg.moe.partition_seed;
            ConvertReport rep = convert_command(cv_in, cv_out, n, k, seed, cfg.moe.noise_bias_init);
            std::cout << "converted to " << rep.n_experts << " experts (top-" << rep.top_k
                      << "); max equivalence deviation " << rep.max_deviation << "; wrote " << cv_out << "\n";
        } else if (expand->parsed()) {
            RunConfig cfg = ex_cfg.resolve();
            ModelParams model = load_checkpoint(ex_in);
            ExpansionReport rep = expand_vocabulary(model, cfg.vocab_layout());
            save_checkpoint(model, ex_out);
            std::cout << "expanded by " << (rep.new_rows_end - rep.new_rows_begin) << " rows ("
                      << rep.added_per_matrix << " parameters per matrix); wrote " << ex_out << "\n";
        } else if (init_cmd->parsed()) {
            RunConfig cfg = in_cfg.resolve();
            ModelParams model = load_checkpoint(in_in);
            const InitScheme scheme = init_scheme_from_string(in_scheme);
            InitResult res;
            if (scheme == InitScheme::GW) {
                Dataset corpus;
                if (!in_corpus.empty()) {
                    corpus = read_dataset(in_corpus);
                } else {
                    CorpusSpec spec;
                    spec.vocab_text = cfg.model.vocab_text;
                    spec.vocab_image = cfg.vocab.vocab_image;
                    spec.n_classes = cfg.data.n_classes;
                    spec.text_len = cfg.data.text_len;
                    spec.image_len = cfg.data.low.image_len;
                    spec.n_samples = cfg.data.low.n_samples;
                    spec.source_seed = cfg.data.source_seed;
                    spec.sample_seed = derive_seed(cfg.train.seed, 0xd2);
                    corpus = generate_corpus(spec);
                }
                GeometryOptions gopt;
                gopt.mode = geometry_mode_from_string(cfg.gw.geometry);
                gopt.window = cfg.gw.cooc_window;
                gopt.factor_dim = cfg.gw.factor_dim;
                gopt.codebook_path = cfg.gw.codebook_path;
                gopt.seed = cfg.gw.geometry_seed;
                GwInitInputs gw;
                gw.geometry = image_side_geometry(corpus, gopt);
                gw.solver.epsilon = cfg.gw.epsilon;
                gw.solver.epsilon_scale = cfg.gw.epsilon_scale;
                gw.solver.max_outer = cfg.gw.max_outer;
                gw.solver.max_sinkhorn = cfg.gw.max_sinkhorn;
                gw.solver.tol = cfg.gw.tol;
                gw.max_anchors = cfg.gw.max_anchors;
                gw.anchor_seed = derive_seed(cfg.train.seed, 0x14);
                res = init_new_rows(model, scheme, &gw, derive_seed(cfg.train.seed, 0x15));
                if (!in_coupling.empty() && res.embedding_solve)
                    write_coupling(res.embedding_solve->coupling, in_coupling);
            } else {
                res = init_new_rows(model, scheme, nullptr, derive_seed(cfg.train.seed, 0x15));
            }
            save_checkpoint(model, in_out);
            std::cout << "initialized new rows with scheme " << in_scheme;
            if (res.embedding_solve) std::cout << " (gw objective " << res.embedding_solve->objective << ")";
            std::cout << "; wrote " << in_out << "\n";
        } else if (train_cmd->parsed()) {
            RunConfig cfg = tr_cfg.resolve();
            ModelParams model = load_checkpoint(tr_in);
            if (!model.expansion) throw ValueError("train: checkpoint has no expanded vocabulary; run expand-vocab");
            if (!model.has_adapters())
                attach_adapters(model, AdapterTargets{cfg.plora.query, cfg.plora.key, cfg.plora.value, cfg.plora.out},
                                cfg.plora.rank, cfg.plora.alpha, cfg.plora.init_seed);
            const TrainMode mode = train_mode_from_string(tr_mode.empty() ? cfg.train.mode : tr_mode);
            if (mode == TrainMode::LoRA) model.adapter_mode = AdapterMode::AllTokens;
            apply_trainable_set(model, mode == TrainMode::FrozenAdapterOnly
                                           ? TrainableSetKind::MultimodalFrozenAdapterOnly
                                           : TrainableSetKind::Multimodal);
            Dataset corpus;
            if (!tr_corpus.empty()) {
                corpus = read_dataset(tr_corpus);
            } else {
                CorpusSpec spec;
                spec.vocab_text = cfg.model.vocab_text;
                spec.vocab_image = cfg.vocab.vocab_image;
                spec.n_classes = cfg.data.n_classes;
                spec.text_len = cfg.data.text_len;
                spec.image_len = cfg.data.low.image_len;
                spec.n_samples = cfg.data.low.n_samples;
                spec.source_seed = cfg.data.source_seed;
                spec.sample_seed = derive_seed(cfg.train.seed, 0xd2);
                corpus = generate_corpus(spec);
            }
            TrainConfig tc = train_config_from(cfg, tr_epochs > 0 ? tr_epochs : cfg.data.low.epochs);
            tc.lora_all_tokens = (mode == TrainMode::LoRA);
            TrainResult res = train(model, corpus.sequences, tc);
            if (!tr_curve.empty()) write_curve_csv(res.curve, tr_curve);
            save_checkpoint(model, tr_out);
            std::cout << "trained " << res.steps << " steps in mode " << train_mode_name(mode) << "; final loss "
                      << (res.curve.empty() ? 0.0 : res.curve.back().loss) << "; wrote " << tr_out << "\n";
        } else if (eval_cmd->parsed()) {
            RunConfig cfg = ev_cfg.resolve();
            ModelParams model = load_checkpoint(ev_in);
            PositionFilter filter = PositionFilter::All;
            if (ev_filter == "text") filter = PositionFilter::TextOnly;
            else if (ev_filter == "image") filter = PositionFilter::ImageOnly;
            else if (ev_filter != "all") throw ConfigError("eval: unknown filter '" + ev_filter + "'");
            std::vector<std::vector<int32_t>> seqs;
            if (!ev_corpus.empty()) {
                seqs = read_dataset(ev_corpus).sequences;
            } else if (filter == PositionFilter::TextOnly) {
                seqs = generate_text_corpus(cfg.model.vocab_text, cfg.data.source_seed, cfg.data.eval_text_len,
                                            cfg.data.eval_text_samples, derive_seed(cfg.train.seed, 0xd1));
            } else {
                CorpusSpec spec;
                spec.vocab_text = cfg.model.vocab_text;
                spec.vocab_image = cfg.vocab.vocab_image;
                spec.n_classes = cfg.data.n_classes;
                spec.text_len = cfg.data.text_len;
                spec.image_len = cfg.data.low.image_len;
                spec.n_samples = cfg.data.probe_samples;
                spec.source_seed = cfg.data.source_seed;
                spec.sample_seed = derive_seed(cfg.train.seed, 0xd4);
                seqs = generate_corpus(spec).sequences;
            }
            std::cout << "ppl(" << ev_filter << ") = " << perplexity(model, seqs, filter) << "\n";
        } else if (analyze->parsed()) {
            RunConfig cfg = an_cfg.resolve();
            std::string probe_path = an_probe;
            if (probe_path.empty()) {
                CorpusSpec spec;
                spec.vocab_text = cfg.model.vocab_text;
                spec.vocab_image = cfg.vocab.vocab_image;
                spec.n_classes = cfg.data.n_classes;
                spec.text_len = cfg.data.text_len;
                spec.image_len = cfg.data.low.image_len;
                spec.n_samples = cfg.data.probe_samples;
                spec.source_seed = cfg.data.source_seed;
                spec.sample_seed = derive_seed(cfg.train.seed, 0xd4);
                Dataset probe = generate_corpus(spec);
                fs::create_directories(an_out);
                probe_path = an_out + "/probe.tokens";
                write_dataset(probe, probe_path);
            }
            AnalyzeReport rep = analyze_command(an_before, an_after, probe_path, an_out,
                                                an_topm > 0 ? an_topm : cfg.analytics.top_m);
            std::cout << "analysis written to " << an_out << "; exclusivity first/last " << rep.exclusivity_first
                      << "/" << rep.exclusivity_last << "\n";
        } else if (gen->parsed()) {
            ModelParams model = load_checkpoint(g_in);
            std::vector<int32_t> prompt;
            {
                std::istringstream ss(g_prompt);
                int32_t id;
                while (ss >> id) prompt.push_back(id);
            }
            SamplingConfig sampling;
            sampling.greedy = g_temp <= 0.0;
            sampling.temperature = g_temp;
            sampling.top_k = g_topk;
            std::optional<int32_t> stop;
            if (g_stop_eoi) {
                if (!model.expansion) throw ValueError("generate: --stop-at-eoi needs an expanded vocabulary");
                stop = static_cast<int32_t>(model.expansion->eoi());
            }
            const auto out_ids = generate(model, prompt, g_max_new, sampling, g_seed, stop);
            for (size_t i = 0; i < out_ids.size(); ++i) std::cout << (i ? " " : "") << out_ids[i];
            std::cout << "\n";
        } else if (matrix->parsed()) {
            RunConfig cfg = mx_cfg.resolve();
            ModelParams base = load_checkpoint(mx_base);
            MatrixOptions mo;
            mo.modes = {TrainMode::PLoRA, TrainMode::LoRA};
            mo.inits = {InitScheme::Random, InitScheme::Mean, InitScheme::GW};
            mo.seeds = mx_seeds;
            mo.train = train_config_from(cfg, mx_epochs > 0 ? mx_epochs : cfg.data.low.epochs);
            mo.corpus.vocab_text = cfg.model.vocab_text;
            mo.corpus.vocab_image = cfg.vocab.vocab_image;
            mo.corpus.n_classes = cfg.data.n_classes;
            mo.corpus.text_len = cfg.data.text_len;
            mo.corpus.image_len = cfg.data.low.image_len;
            mo.corpus.n_samples = cfg.data.low.n_samples;
            mo.corpus.source_seed = cfg.data.source_seed;
            mo.corpus.sample_seed = derive_seed(cfg.train.seed, 0xd2);
            mo.probe = mo.corpus;
            mo.probe.n_samples = cfg.data.probe_samples;
            mo.probe.sample_seed = derive_seed(cfg.train.seed, 0xd4);
            mo.eval_text_samples = cfg.data.eval_text_samples;
            mo.eval_text_len = cfg.data.eval_text_len;
            mo.eval_text_seed = derive_seed(cfg.train.seed, 0xd1);
            mo.rank = cfg.plora.rank;
            mo.alpha = cfg.plora.alpha;
            mo.geometry.mode = geometry_mode_from_string(cfg.gw.geometry);
            mo.geometry.window = cfg.gw.cooc_window;
            mo.geometry.factor_dim = cfg.gw.factor_dim;
            mo.geometry.codebook_path = cfg.gw.codebook_path;
            mo.geometry.seed = cfg.gw.geometry_seed;
            mo.gw_solver.epsilon = cfg.gw.epsilon;
            mo.gw_solver.epsilon_scale = cfg.gw.epsilon_scale;
            mo.gw_solver.max_outer = cfg.gw.max_outer;
            mo.gw_solver.max_sinkhorn = cfg.gw.max_sinkhorn;
            mo.gw_solver.tol = cfg.gw.tol;
            mo.gw_max_anchors = cfg.gw.max_anchors;
            mo.loss_threshold = cfg.train.loss_threshold;
            mo.threshold_window = cfg.train.threshold_window;
            fs::create_directories(mx_out);
            auto cells = run_comparison_matrix(base, mo, [&](const MatrixCellResult& c) {
                std::cout << train_mode_name(c.mode) << "/" << init_scheme_name(c.init) << "/seed " << c.seed
                          << ": dppl_text " << c.dppl_text << ", ppl_image " << c.ppl_image << ", steps "
                          << c.steps_to_threshold << "\n";
            }, mx_jobs);
            write_matrix_csv(cells, mx_out + "/matrix.csv");
            for (const auto& c : cells)
                write_curve_csv(c.curve, mx_out + "/curve_" + std::string(train_mode_name(c.mode)) + "_" +
                                             init_scheme_name(c.init) + "_" + std::to_string(c.seed) + ".csv");
            std::cout << "matrix written to " << mx_out << "/matrix.csv\n";
        } else if (pipe->parsed()) {
            RunConfig cfg = pl_cfg.resolve();
            if (pl_stage != "full" && pl_stage != "low-only")
                throw ConfigError("pipeline: unknown --stage '" + pl_stage + "'");
            PipelineOptions po;
            po.config = cfg;
            po.out_dir = pl_out;
            po.low_only = (pl_stage == "low-only");
            po.f32_checkpoints = pl_f32;
            po.log = [](const std::string& line) { std::cout << line << "\n"; };
            PipelineSummary sum = run_pipeline(po);
            std::cout << "text ppl " << sum.ppl_text_base << " -> " << sum.ppl_text_final << "; image ppl "
                      << sum.ppl_image_final << "\n";
        } else if (pc->parsed()) {
            RunConfig cfg = pc_cfg.resolve();
            std::cout << config_to_json_string(cfg) << "\n";
        }
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const IoError& e) {
        std::cerr << "io error: " << e.what() << "\n";
        return kExitIo;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitNumeric;
    }
    return kExitOk;
}
