/*
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */
#include "m3dbfs/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <mutex>
#include <numeric>
#include <stdexcept>
#include <thread>
#include <unordered_set>

#include "m3dbfs/adam.hpp"
#include "m3dbfs/losses.hpp"
#include "m3dbfs/ops.hpp"
#include "m3dbfs/rng.hpp"

namespace m3dbfs {

namespace {

void require(bool ok, const std::string& msg) {
    if (!ok) throw std::runtime_error(msg);
}

void check_width(const std::vector<PreparedSample>& data, const RunConfig& cfg,
                 const char* who) {
    std::size_t n = data.front().x_sc->shape[0];
    require(n == cfg.regions, std::string(who) + ": dataset has " + std::to_string(n) +
                                  " regions but the config expects " +
                                  std::to_string(cfg.regions));
}

TensorPtr unimodal_logits(const GCNEncoder& enc, const ClassifierHead& head,
                          const PreparedSample& s, Modality mod) {
    const TensorPtr& ahat = mod == Modality::sc ? s.ahat_sc : s.ahat_fc;
    const TensorPtr& x = mod == Modality::sc ? s.x_sc : s.x_fc;
    return classify(head, readout(gcn_forward(enc, ahat, x)));
}

/// Early-stopping holdout: like stratified_split, but if nothing can be held
/// out the val view falls back to the train part itself.
void stratified_holdout(const std::vector<PreparedSample>& data, double frac, Rng& rng,
                        std::vector<PreparedSample>& train_out,
                        std::vector<PreparedSample>& val_out) {
    stratified_split(data, frac, rng, train_out, val_out);
    if (val_out.empty()) val_out = train_out;
}

struct BatchTerms {
    TensorPtr loss;
    double ce = 0.0, distill = 0.0, contrast = 0.0, moe = 0.0, disen = 0.0;
    double fusion_cv2 = 0.0;
};

using BatchFn = std::function<BatchTerms(const std::vector<std::size_t>&)>;
using LogitsFn = std::function<TensorPtr(const PreparedSample&)>;

double label_accuracy(const LogitsFn& fn, const std::vector<PreparedSample>& data) {
    std::size_t correct = 0;
    for (const PreparedSample& s : data) {
        TensorPtr t = fn(s);
        int pred = t->values[1] > t->values[0] ? 1 : 0;
        if (pred == s.label) ++correct;
    }
    return data.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(data.size());
}

/// Minibatch Adam with early stopping on validation accuracy. Batches index
/// into `train`; the best-validation snapshot is restored on exit.
StageHistory run_epochs(const char* stage_name, std::string hist_name, ParameterStore& store,
                        const RunConfig& cfg, const std::vector<PreparedSample>& train,
                        const std::vector<PreparedSample>& val, const BatchFn& batch_fn,
                        const LogitsFn& val_logits, Rng& order_rng) {
    AdamConfig ac;
    ac.lr = cfg.lr;
    ac.weight_decay = cfg.weight_decay;
    Adam opt(ac);

    StageHistory hist{std::move(hist_name), {}};
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), std::size_t{0});

    double best = -1.0;
    std::vector<std::vector<double>> best_snap;
    std::size_t stale = 0;

    for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        order_rng.shuffle(order);
        EpochLog log;
        log.epoch = epoch;
        double weight = 0.0;
        for (std::size_t begin = 0; begin < order.size(); begin += cfg.batch) {
            std::size_t end = std::min(begin + cfg.batch, order.size());
            std::vector<std::size_t> batch(order.begin() + static_cast<std::ptrdiff_t>(begin),
                                           order.begin() + static_cast<std::ptrdiff_t>(end));
            store.zero_grad();
            // Overflow can surface either as a non-finite loss scalar or as a
            // finiteness guard firing inside an op; report both with the epoch.
            BatchTerms t;
            try {
                t = batch_fn(batch);
            } catch (const std::runtime_error& e) {
                if (std::string(e.what()).find("non-finite") != std::string::npos)
                    throw std::runtime_error(std::string(stage_name) +
                                             ": loss diverged (non-finite) at epoch " +
                                             std::to_string(epoch) + " (" + e.what() + ")");
                throw;
            }
            double lv = t.loss->values[0];
            if (!std::isfinite(lv))
                throw std::runtime_error(std::string(stage_name) +
                                         ": loss diverged (non-finite) at epoch " +
                                         std::to_string(epoch));
            backward(t.loss);
            opt.step(store);
            auto w = static_cast<double>(batch.size());
            log.loss += lv * w;
            log.ce += t.ce * w;
            log.distill += t.distill * w;
            log.contrast += t.contrast * w;
            log.moe += t.moe * w;
            log.disen += t.disen * w;
            log.fusion_cv2 += t.fusion_cv2 * w;
            weight += w;
        }
        log.loss /= weight;
        log.ce /= weight;
        log.distill /= weight;
        log.contrast /= weight;
        log.moe /= weight;
        log.disen /= weight;
        log.fusion_cv2 /= weight;
        log.val_acc = label_accuracy(val_logits, val);
        hist.epochs.push_back(log);

        if (log.val_acc > best + 1e-12) {
            best = log.val_acc;
            best_snap = store.snapshot();
            stale = 0;
        } else if (++stale >= cfg.patience) {
            break;
        }
    }
    if (!best_snap.empty()) store.restore(best_snap);
    return hist;
}

/// Copy the checkpoint into the store, then require every store entry under
/// `prefix` to have come from the checkpoint (empty prefix covers everything).
void apply_covering(const Checkpoint& ckpt, ParameterStore& store, const std::string& what,
                    const std::string& prefix = "") {
    apply_checkpoint_to_store(ckpt, store);
    std::unordered_set<std::string> names;
    for (const auto& r : ckpt.records) names.insert(r.name);
    for (const auto& e : store.entries())
        if (e.name.rfind(prefix, 0) == 0 && !names.count(e.name))
            throw std::runtime_error(what + " is missing weights for " + e.name);
}

/// Stack per-sample routing records of the same block into one batch record;
/// only the fields the balance losses read are populated.
RoutingRecord merge_records(const std::vector<const RoutingRecord*>& rs) {
    RoutingRecord out;
    out.experts = rs.front()->experts;
    std::vector<TensorPtr> gates, loads;
    gates.reserve(rs.size());
    loads.reserve(rs.size());
    for (const RoutingRecord* r : rs) {
        out.tokens += r->tokens;
        gates.push_back(r->gate_matrix);
        loads.push_back(r->load_matrix);
    }
    out.gate_matrix = ops::vstack(gates);
    out.load_matrix = ops::vstack(loads);
    return out;
}

/// Realized importance CV^2 over a set of records (plain doubles, no graph).
double realized_importance_cv2(const std::vector<const RoutingRecord*>& rs) {
    std::vector<double> col(rs.front()->experts, 0.0);
    for (const RoutingRecord* r : rs)
        for (std::size_t t = 0; t < r->tokens; ++t)
            for (std::size_t e = 0; e < r->experts; ++e)
                col[e] += r->gate_matrix->values[t * r->experts + e];
    return cv_squared(col);
}

void build_stage1_half(ParameterStore& store, const RunConfig& cfg, Rng& rng,
                       const std::string& prefix, GCNEncoder& enc, ClassifierHead& head) {
    enc = make_gcn_encoder(store, prefix + ".enc", cfg.regions, cfg.encoder_hidden,
                           cfg.embed_dim, cfg.encoder_layers, rng);
    head = make_classifier_head(store, prefix + ".head", cfg.embed_dim, rng);
}

}  // namespace

std::vector<PreparedSample> prepare_samples(const Dataset& d) {
    std::vector<PreparedSample> out;
    out.reserve(d.samples.size());
    for (const Sample& s : d.samples) {
        PreparedSample p;
        p.id = s.id;
        p.label = s.label;
        p.ahat_sc = normalized_adjacency(s.sc.adjacency, s.sc.regions);
        p.x_sc = Tensor::matrix(s.sc.regions, s.sc.regions, s.sc.features);
        p.ahat_fc = normalized_adjacency(s.fc.adjacency, s.fc.regions);
        p.x_fc = Tensor::matrix(s.fc.regions, s.fc.regions, s.fc.features);
        out.push_back(std::move(p));
    }
    return out;
}

std::vector<PreparedSample> select_samples(const std::vector<PreparedSample>& all,
                                           const std::vector<std::size_t>& idx) {
    std::vector<PreparedSample> out;
    out.reserve(idx.size());
    for (std::size_t i : idx) {
        require(i < all.size(), "select_samples: index out of range");
        out.push_back(all[i]);
    }
    return out;
}

void stratified_split(const std::vector<PreparedSample>& data, double frac, Rng& rng,
                      std::vector<PreparedSample>& rest, std::vector<PreparedSample>& held) {
    std::vector<std::size_t> byc[2];
    for (std::size_t i = 0; i < data.size(); ++i) byc[data[i].label == 1].push_back(i);
    std::vector<char> in_held(data.size(), 0);
    for (auto& idx : byc) {
        if (idx.size() < 2) continue;
        rng.shuffle(idx);
        auto nh = static_cast<std::size_t>(std::llround(frac * static_cast<double>(idx.size())));
        nh = std::min(std::max<std::size_t>(nh, 1), idx.size() - 1);
        for (std::size_t j = 0; j < nh; ++j) in_held[idx[j]] = 1;
    }
    for (std::size_t i = 0; i < data.size(); ++i)
        (in_held[i] ? held : rest).push_back(data[i]);
}

Stage1Model build_stage1(ParameterStore& store, const RunConfig& cfg, Rng& rng) {
    Stage1Model m;
    build_stage1_half(store, cfg, rng, "s1.sc", m.enc_sc, m.head_sc);
    build_stage1_half(store, cfg, rng, "s1.fc", m.enc_fc, m.head_fc);
    return m;
}

Stage2Model build_stage2(ParameterStore& store, const RunConfig& cfg, Rng& rng) {
    Stage2Model m;
    m.depth = cfg.moe_depth;
    m.enc_sc = make_gcn_encoder(store, "s2.sc.enc", cfg.regions, cfg.encoder_hidden,
                                cfg.embed_dim, cfg.encoder_layers, rng);
    m.enc_fc = make_gcn_encoder(store, "s2.fc.enc", cfg.regions, cfg.encoder_hidden,
                                cfg.embed_dim, cfg.encoder_layers, rng);
    m.proj_sc = make_projection(store, "s2.sc.proj", cfg.embed_dim, cfg.embed_dim, rng);
    m.proj_fc = make_projection(store, "s2.fc.proj", cfg.embed_dim, cfg.embed_dim, rng);
    m.expert_sc = make_expert(store, "s2.sc.expert", cfg.embed_dim, cfg.expert_hidden, rng);
    m.expert_fc = make_expert(store, "s2.fc.expert", cfg.embed_dim, cfg.expert_hidden, rng);
    m.expert_fusion =
        make_expert(store, "s2.fusion.expert", cfg.embed_dim, cfg.expert_hidden, rng);
    m.ffn = make_classifier_head(store, "s2.ffn", 3 * cfg.embed_dim, rng);
    return m;
}

Stage3Model build_stage3(ParameterStore& store, const RunConfig& cfg, Rng& rng) {
    Stage3Model m;
    m.base = build_stage2(store, cfg, rng);
    m.moe_sc = make_moe_stack(store, "s3.sc.moe", MoEKind::sc, cfg.embed_dim,
                              cfg.expert_hidden, cfg.experts, cfg.k_top, cfg.moe_depth, rng);
    m.moe_fc = make_moe_stack(store, "s3.fc.moe", MoEKind::fc, cfg.embed_dim,
                              cfg.expert_hidden, cfg.experts, cfg.k_top, cfg.moe_depth, rng);
    m.moe_fusion =
        make_moe_stack(store, "s3.fusion.moe", MoEKind::fusion, cfg.embed_dim,
                       cfg.expert_hidden, cfg.experts, cfg.k_top, cfg.moe_depth, rng);
    m.anchor = make_projection(store, "s3.anchor", 3 * cfg.embed_dim, cfg.embed_dim, rng);
    m.head = make_classifier_head(store, "s3.head", cfg.embed_dim, rng);
    return m;
}

Stage1Model stage1_from_store(const ParameterStore& store, const RunConfig& cfg) {
    Stage1Model m;
    m.enc_sc = gcn_from_store(store, "s1.sc.enc", cfg.encoder_layers);
    m.head_sc = head_from_store(store, "s1.sc.head");
    m.enc_fc = gcn_from_store(store, "s1.fc.enc", cfg.encoder_layers);
    m.head_fc = head_from_store(store, "s1.fc.head");
    return m;
}

Stage2Model stage2_from_store(const ParameterStore& store, const RunConfig& cfg) {
    Stage2Model m;
    m.depth = cfg.moe_depth;
    m.enc_sc = gcn_from_store(store, "s2.sc.enc", cfg.encoder_layers);
    m.enc_fc = gcn_from_store(store, "s2.fc.enc", cfg.encoder_layers);
    m.proj_sc = projection_from_store(store, "s2.sc.proj");
    m.proj_fc = projection_from_store(store, "s2.fc.proj");
    m.expert_sc = expert_from_store(store, "s2.sc.expert");
    m.expert_fc = expert_from_store(store, "s2.fc.expert");
    m.expert_fusion = expert_from_store(store, "s2.fusion.expert");
    m.ffn = head_from_store(store, "s2.ffn");
    return m;
}

Stage3Model stage3_from_store(const ParameterStore& store, const RunConfig& cfg) {
    Stage3Model m;
    m.base = stage2_from_store(store, cfg);
    m.moe_sc = moe_stack_from_store(store, "s3.sc.moe", MoEKind::sc, cfg.experts, cfg.k_top,
                                    cfg.moe_depth);
    m.moe_fc = moe_stack_from_store(store, "s3.fc.moe", MoEKind::fc, cfg.experts, cfg.k_top,
                                    cfg.moe_depth);
    m.moe_fusion = moe_stack_from_store(store, "s3.fusion.moe", MoEKind::fusion, cfg.experts,
                                        cfg.k_top, cfg.moe_depth);
    m.anchor = projection_from_store(store, "s3.anchor");
    m.head = head_from_store(store, "s3.head");
    return m;
}

Stage1Model stage1_model_from_checkpoint(ParameterStore& store, const Checkpoint& ckpt,
                                         const RunConfig& cfg) {
    expect_stage(ckpt, 1);
    Rng rng(0);  // skeleton values are overwritten by the checkpoint
    Stage1Model m = build_stage1(store, cfg, rng);
    apply_covering(ckpt, store, "stage-1 checkpoint");
    return m;
}

Stage2Model stage2_model_from_checkpoint(ParameterStore& store, const Checkpoint& ckpt,
                                         const RunConfig& cfg) {
    expect_stage(ckpt, 2);
    Rng rng(0);
    Stage2Model m = build_stage2(store, cfg, rng);
    apply_covering(ckpt, store, "stage-2 checkpoint");
    return m;
}

Stage3Model stage3_model_from_checkpoint(ParameterStore& store, const Checkpoint& ckpt,
                                         const RunConfig& cfg) {
    expect_stage(ckpt, 3);
    Rng rng(0);
    Stage3Model m = build_stage3(store, cfg, rng);
    apply_covering(ckpt, store, "stage-3 checkpoint");
    store.set_frozen_prefix("s2.", true);
    return m;
}

TensorPtr stage1_logits(const Stage1Model& m, const PreparedSample& s, Modality mod) {
    return mod == Modality::sc ? unimodal_logits(m.enc_sc, m.head_sc, s, Modality::sc)
                               : unimodal_logits(m.enc_fc, m.head_fc, s, Modality::fc);
}

Stage2Forward stage2_forward(const Stage2Model& m, const PreparedSample& s) {
    auto h_sc = gcn_forward(m.enc_sc, s.ahat_sc, s.x_sc);
    auto h_fc = gcn_forward(m.enc_fc, s.ahat_fc, s.x_fc);
    Stage2Forward out;
    out.pooled_sc = readout(h_sc);
    out.pooled_fc = readout(h_fc);
    auto tok_sc = project_tokens(m.proj_sc, h_sc);
    auto tok_fc = project_tokens(m.proj_fc, h_fc);
    auto y_sc = expert_stack_forward(m.expert_sc, tok_sc, m.depth);
    auto y_fc = expert_stack_forward(m.expert_fc, tok_fc, m.depth);
    auto y_fus = expert_stack_forward(m.expert_fusion, ops::vstack({tok_sc, tok_fc}), m.depth);
    out.z_sc = readout(y_sc);
    out.z_fc = readout(y_fc);
    out.z_fusion = readout(y_fus);
    out.logits = classify(m.ffn, ops::concat({out.z_sc, out.z_fc, out.z_fusion}));
    return out;
}

Stage3Forward stage3_forward(const Stage3Model& m, const PreparedSample& s, bool train,
                             Rng& rng) {
    const Stage2Model& b = m.base;
    auto h_sc = gcn_forward(b.enc_sc, s.ahat_sc, s.x_sc);
    auto h_fc = gcn_forward(b.enc_fc, s.ahat_fc, s.x_fc);
    auto tok_sc = project_tokens(b.proj_sc, h_sc);
    auto tok_fc = project_tokens(b.proj_fc, h_fc);
    std::size_t n = tok_sc->shape[0];

    auto sc_out = moe_stack_forward(m.moe_sc, tok_sc, train, rng);
    auto fc_out = moe_stack_forward(m.moe_fc, tok_fc, train, rng);
    auto fus_out = moe_stack_forward(m.moe_fusion, ops::vstack({tok_sc, tok_fc}), train, rng);

    Stage3Forward out;
    out.rec_sc = std::move(sc_out.records);
    for (auto& r : out.rec_sc) r.token_modality.assign(r.tokens, Modality::sc);
    out.rec_fc = std::move(fc_out.records);
    for (auto& r : out.rec_fc) r.token_modality.assign(r.tokens, Modality::fc);
    out.rec_fusion = std::move(fus_out.records);
    for (auto& r : out.rec_fusion) {
        r.token_modality.assign(r.tokens, Modality::sc);
        for (std::size_t t = n; t < r.tokens; ++t) r.token_modality[t] = Modality::fc;
    }

    out.z_sc = readout(sc_out.y);
    out.z_fc = readout(fc_out.y);
    out.z_fusion = readout(fus_out.y);
    auto cat3 = ops::concat({out.z_sc, out.z_fc, out.z_fusion});
    out.ffn_logits = classify(b.ffn, cat3);
    auto anchor_row = project_tokens(m.anchor, ops::reshape(cat3, {1, cat3->numel()}));
    out.z_anchor = ops::reshape(anchor_row, {anchor_row->shape[1]});
    out.logits = classify(m.head, out.z_anchor);
    return out;
}

TrainResult train_stage1(const std::vector<PreparedSample>& data, const RunConfig& cfg,
                         std::uint64_t seed) {
    cfg.validate();
    require(!data.empty(), "train_stage1: empty training set");
    check_width(data, cfg, "train_stage1");

    std::vector<PreparedSample> tr, va;
    Rng vr = derive_rng(seed, "s1/val");
    stratified_holdout(data, cfg.val_fraction, vr, tr, va);

    TrainResult res;
    ParameterStore merged;
    for (Modality mod : {Modality::sc, Modality::fc}) {
        const char* tag = mod == Modality::sc ? "sc" : "fc";
        ParameterStore store;
        Rng ir = derive_rng(seed, std::string("s1/init/") + tag);
        GCNEncoder enc;
        ClassifierHead head;
        build_stage1_half(store, cfg, ir, std::string("s1.") + tag, enc, head);

        auto batch_fn = [&](const std::vector<std::size_t>& batch) {
            std::vector<TensorPtr> rows;
            std::vector<int> labels;
            rows.reserve(batch.size());
            for (std::size_t i : batch) {
                rows.push_back(unimodal_logits(enc, head, tr[i], mod));
                labels.push_back(tr[i].label);
            }
            BatchTerms t;
            t.loss = cross_entropy(ops::vstack(rows), labels);
            t.ce = t.loss->values[0];
            return t;
        };
        auto val_fn = [&](const PreparedSample& s) { return unimodal_logits(enc, head, s, mod); };
        Rng orng = derive_rng(seed, std::string("s1/order/") + tag);
        res.histories.push_back(run_epochs("train_stage1", std::string("stage1_") + tag, store,
                                           cfg, tr, va, batch_fn, val_fn, orng));
        for (const ParamEntry& e : store.entries()) merged.add(e.name, e.tensor, e.frozen);
    }
    res.ckpt = checkpoint_from_store(merged, 1, config_echo(cfg));
    return res;
}

TrainResult train_stage2(const std::vector<PreparedSample>& data, const Checkpoint& stage1,
                         const RunConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    require(!data.empty(), "train_stage2: empty training set");
    check_width(data, cfg, "train_stage2");
    expect_stage(stage1, 1);

    // Stage-1 encoders become constant teachers: freezing clears requires_grad,
    // so their pooled representations carry no graph.
    ParameterStore teacher_store;
    Stage1Model teacher = stage1_model_from_checkpoint(teacher_store, stage1, cfg);
    teacher_store.set_frozen_prefix("s1.", true);

    ParameterStore store;
    Rng ir = derive_rng(seed, "s2/init");
    Stage2Model model = build_stage2(store, cfg, ir);
    if (cfg.warm_start) {
        for (std::size_t l = 0; l < model.enc_sc.weights.size(); ++l)
            model.enc_sc.weights[l]->values = teacher.enc_sc.weights[l]->values;
        for (std::size_t l = 0; l < model.enc_fc.weights.size(); ++l)
            model.enc_fc.weights[l]->values = teacher.enc_fc.weights[l]->values;
    }

    std::vector<PreparedSample> tr, va;
    Rng vr = derive_rng(seed, "s2/val");
    stratified_holdout(data, cfg.val_fraction, vr, tr, va);

    // Teacher targets never change; compute them once per training sample.
    std::vector<TensorPtr> teach_sc(tr.size()), teach_fc(tr.size());
    for (std::size_t i = 0; i < tr.size(); ++i) {
        teach_sc[i] = readout(gcn_forward(teacher.enc_sc, tr[i].ahat_sc, tr[i].x_sc));
        teach_fc[i] = readout(gcn_forward(teacher.enc_fc, tr[i].ahat_fc, tr[i].x_fc));
    }

    auto batch_fn = [&](const std::vector<std::size_t>& batch) {
        std::vector<TensorPtr> lrows, s_sc, s_fc, t_sc, t_fc;
        std::vector<int> labels;
        for (std::size_t i : batch) {
            Stage2Forward f = stage2_forward(model, tr[i]);
            lrows.push_back(f.logits);
            s_sc.push_back(f.pooled_sc);
            s_fc.push_back(f.pooled_fc);
            t_sc.push_back(teach_sc[i]);
            t_fc.push_back(teach_fc[i]);
            labels.push_back(tr[i].label);
        }
        auto student_sc = ops::vstack(s_sc);
        auto student_fc = ops::vstack(s_fc);
        auto ce = cross_entropy(ops::vstack(lrows), labels);
        auto dst = distill_loss(student_sc, student_fc, ops::vstack(t_sc), ops::vstack(t_fc),
                                cfg.tau);
        auto ct = cmbp_contrast(student_sc, student_fc, cfg.tau_c);
        BatchTerms t;
        t.loss = stage2_loss(ce, dst, ct, cfg.beta);
        t.ce = ce->values[0];
        t.distill = dst->values[0];
        t.contrast = ct->values[0];
        return t;
    };
    auto val_fn = [&](const PreparedSample& s) { return stage2_forward(model, s).logits; };
    Rng orng = derive_rng(seed, "s2/order");

    TrainResult res;
    res.histories.push_back(
        run_epochs("train_stage2", "stage2", store, cfg, tr, va, batch_fn, val_fn, orng));
    res.ckpt = checkpoint_from_store(store, 2, config_echo(cfg));
    return res;
}

TrainResult train_stage3(const std::vector<PreparedSample>& data, const Checkpoint& stage2,
                         const RunConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    require(!data.empty(), "train_stage3: empty training set");
    check_width(data, cfg, "train_stage3");
    expect_stage(stage2, 2);

    ParameterStore store;
    Rng ir = derive_rng(seed, "s3/init");
    Stage3Model model = build_stage3(store, cfg, ir);
    apply_covering(stage2, store, "train_stage3: stage-2 checkpoint", "s2.");

    // Every expert starts as a clone of its stage-2 single expert; gates are
    // reinitialized. Freezing happens after the clone so values can be read.
    Rng grng = derive_rng(seed, "s3/gates");
    for (MoEBlock& b : model.moe_sc.blocks) init_experts_from(b, model.base.expert_sc, grng);
    for (MoEBlock& b : model.moe_fc.blocks) init_experts_from(b, model.base.expert_fc, grng);
    for (MoEBlock& b : model.moe_fusion.blocks)
        init_experts_from(b, model.base.expert_fusion, grng);
    store.set_frozen_prefix("s2.", true);

    std::vector<PreparedSample> tr, va;
    Rng vr = derive_rng(seed, "s3/val");
    stratified_holdout(data, cfg.val_fraction, vr, tr, va);

    Rng nrng = derive_rng(seed, "s3/noise");
    std::size_t depth = cfg.moe_depth;

    auto batch_fn = [&](const std::vector<std::size_t>& batch) {
        std::vector<Stage3Forward> fwd;
        fwd.reserve(batch.size());
        std::vector<TensorPtr> lrows, zsc, zfc, zfus, zanc;
        std::vector<int> labels;
        for (std::size_t i : batch) {
            fwd.push_back(stage3_forward(model, tr[i], true, nrng));
            const Stage3Forward& f = fwd.back();
            lrows.push_back(f.logits);
            zsc.push_back(f.z_sc);
            zfc.push_back(f.z_fc);
            zfus.push_back(f.z_fusion);
            zanc.push_back(f.z_anchor);
            labels.push_back(tr[i].label);
        }
        auto ce = cross_entropy(ops::vstack(lrows), labels);
        auto disen = disentangle_loss(ops::vstack(zsc), ops::vstack(zfc), ops::vstack(zfus),
                                      ops::vstack(zanc), cfg.tau_d);

        BatchTerms t;
        TensorPtr moe_total;
        for (int kind = 0; kind < 3; ++kind) {
            TensorPtr layer_sum;
            for (std::size_t l = 0; l < depth; ++l) {
                std::vector<const RoutingRecord*> rs;
                rs.reserve(fwd.size());
                for (const Stage3Forward& f : fwd) {
                    const auto& recs =
                        kind == 0 ? f.rec_sc : (kind == 1 ? f.rec_fc : f.rec_fusion);
                    rs.push_back(&recs[l]);
                }
                if (kind == 2) t.fusion_cv2 += realized_importance_cv2(rs);
                if (cfg.moe_balance) {
                    RoutingRecord merged = merge_records(rs);
                    auto half =
                        ops::scale(ops::add(importance_loss(merged), load_loss(merged)), 0.5);
                    layer_sum = layer_sum ? ops::add(layer_sum, half) : half;
                }
            }
            if (cfg.moe_balance) {
                auto kind_term = ops::scale(layer_sum, 1.0 / static_cast<double>(depth));
                moe_total = moe_total ? ops::add(moe_total, kind_term) : kind_term;
            }
        }
        t.fusion_cv2 /= static_cast<double>(depth);
        if (!moe_total) moe_total = Tensor::scalar(0.0);
        t.loss = stage3_loss(ce, moe_total, disen, cfg.alpha);
        t.ce = ce->values[0];
        t.moe = moe_total->values[0];
        t.disen = disen->values[0];
        return t;
    };
    auto val_fn = [&](const PreparedSample& s) {
        Rng quiet(0);  // inference consumes no randomness
        return stage3_forward(model, s, false, quiet).logits;
    };
    Rng orng = derive_rng(seed, "s3/order");

    TrainResult res;
    res.histories.push_back(
        run_epochs("train_stage3", "stage3", store, cfg, tr, va, batch_fn, val_fn, orng));

    if (!frozen_matches_checkpoint(store, stage2, "s2."))
        throw std::logic_error("train_stage3: frozen parameters changed during training");
    res.ckpt = checkpoint_from_store(store, 3, config_echo(cfg));
    return res;
}

std::string history_tsv(const StageHistory& h) {
    std::string out = "epoch\tloss\tval_acc\tce\tdistill\tcontrast\tmoe\tdisen\tfusion_cv2\n";
    char buf[256];
    for (const EpochLog& e : h.epochs) {
        std::snprintf(buf, sizeof buf,
                      "%zu\t%.6f\t%.4f\t%.6f\t%.6f\t%.6f\t%.6f\t%.6f\t%.6f\n", e.epoch, e.loss,
                      e.val_acc, e.ce, e.distill, e.contrast, e.moe, e.disen, e.fusion_cv2);
        out += buf;
    }
    return out;
}

Metrics evaluate(const std::function<TensorPtr(const PreparedSample&)>& logits_fn,
                 const std::vector<PreparedSample>& data) {
    require(!data.empty(), "evaluate: empty evaluation set");
    std::vector<int> y_true, y_pred;
    std::vector<double> scores;
    for (const PreparedSample& s : data) {
        TensorPtr t = logits_fn(s);
        double l0 = t->values[0], l1 = t->values[1];
        y_true.push_back(s.label);
        y_pred.push_back(l1 > l0 ? 1 : 0);
        scores.push_back(1.0 / (1.0 + std::exp(l0 - l1)));
    }
    return compute_metrics(y_true, y_pred, scores);
}

CvResult run_cv(const Dataset& data, const RunConfig& cfg, std::size_t k,
                std::size_t repeats, std::uint64_t seed) {
    cfg.validate();
    require(repeats >= 1, "run_cv: repeats must be at least 1");
    auto prepared = prepare_samples(data);
    std::vector<int> labels;
    labels.reserve(data.samples.size());
    for (const Sample& s : data.samples) labels.push_back(s.label);

    std::vector<std::vector<FoldSplit>> plans(repeats);
    for (std::size_t r = 0; r < repeats; ++r)
        plans[r] = kfold_split(data.samples.size(), k, labels,
                               derive_seed(seed, "cv/folds/" + std::to_string(r)));

    std::vector<Metrics> runs(repeats * k);
    std::atomic<std::size_t> next{0};
    std::atomic<bool> failed{false};
    std::exception_ptr err;
    std::mutex err_mu;

    auto worker = [&]() {
        while (!failed.load()) {
            std::size_t i = next.fetch_add(1);
            if (i >= runs.size()) break;
            try {
                std::size_t r = i / k, f = i % k;
                std::uint64_t rs =
                    derive_seed(seed, "cv/run/" + std::to_string(r) + "/" + std::to_string(f));
                auto train = select_samples(prepared, plans[r][f].train_idx);
                auto test = select_samples(prepared, plans[r][f].test_idx);
                auto s1 = train_stage1(train, cfg, derive_seed(rs, "stage1"));
                auto s2 = train_stage2(train, s1.ckpt, cfg, derive_seed(rs, "stage2"));
                auto s3 = train_stage3(train, s2.ckpt, cfg, derive_seed(rs, "stage3"));
                ParameterStore es;
                Stage3Model m3 = stage3_model_from_checkpoint(es, s3.ckpt, cfg);
                runs[i] = evaluate(
                    [&](const PreparedSample& s) {
                        Rng quiet(0);
                        return stage3_forward(m3, s, false, quiet).logits;
                    },
                    test);
            } catch (...) {
                std::lock_guard<std::mutex> lock(err_mu);
                if (!err) err = std::current_exception();
                failed.store(true);
            }
        }
    };

    std::size_t nthreads = std::min(cfg.threads, runs.size());
    if (nthreads <= 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        pool.reserve(nthreads);
        for (std::size_t t = 0; t < nthreads; ++t) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }
    if (err) std::rethrow_exception(err);

    CvResult res;
    res.runs = std::move(runs);
    res.table_tsv = metrics_table_tsv(res.runs);
    return res;
}

RoutingSummary aggregate_routing(const Stage3Model& m,
                                 const std::vector<PreparedSample>& data) {
    require(!data.empty(), "aggregate_routing: empty dataset");
    RoutingSummary sum;
    sum.depth = m.moe_sc.blocks.size();
    sum.experts = m.moe_sc.blocks.front().experts.size();
    for (auto& kind : sum.fractions)
        kind.assign(sum.depth, std::vector<double>(sum.experts, 0.0));
    sum.fusion_counts.assign(sum.depth, std::vector<std::size_t>(sum.experts, 0));
    sum.fusion_sc_frac.assign(sum.depth, std::vector<double>(sum.experts, 0.0));

    std::vector<std::vector<std::size_t>> totals(3, std::vector<std::size_t>(sum.depth, 0));
    auto fusion_sc = sum.fusion_counts;  // same shape, counts SC-origin selections

    Rng quiet(0);
    for (const PreparedSample& s : data) {
        Stage3Forward f = stage3_forward(m, s, false, quiet);
        for (int kind = 0; kind < 3; ++kind) {
            const auto& recs = kind == 0 ? f.rec_sc : (kind == 1 ? f.rec_fc : f.rec_fusion);
            for (std::size_t l = 0; l < recs.size(); ++l) {
                const RoutingRecord& r = recs[l];
                for (std::size_t t = 0; t < r.tokens; ++t) {
                    for (std::size_t e : r.selected[t]) {
                        sum.fractions[static_cast<std::size_t>(kind)][l][e] += 1.0;
                        ++totals[static_cast<std::size_t>(kind)][l];
                        if (kind == 2) {
                            ++sum.fusion_counts[l][e];
                            if (r.token_modality[t] == Modality::sc) ++fusion_sc[l][e];
                        }
                    }
                }
            }
        }
    }
    for (int kind = 0; kind < 3; ++kind)
        for (std::size_t l = 0; l < sum.depth; ++l)
            for (std::size_t e = 0; e < sum.experts; ++e)
                sum.fractions[static_cast<std::size_t>(kind)][l][e] /=
                    static_cast<double>(totals[static_cast<std::size_t>(kind)][l]);
    for (std::size_t l = 0; l < sum.depth; ++l)
        for (std::size_t e = 0; e < sum.experts; ++e)
            if (sum.fusion_counts[l][e] > 0)
                sum.fusion_sc_frac[l][e] = static_cast<double>(fusion_sc[l][e]) /
                                           static_cast<double>(sum.fusion_counts[l][e]);
    return sum;
}

bool frozen_matches_checkpoint(const ParameterStore& store, const Checkpoint& ckpt,
                               const std::string& prefix) {
    for (const auto& r : ckpt.records) {
        if (r.name.rfind(prefix, 0) != 0) continue;
        if (!store.has(r.name)) return false;
        if (store.get(r.name)->values != r.values) return false;
    }
    return true;
}

}  // namespace m3dbfs
