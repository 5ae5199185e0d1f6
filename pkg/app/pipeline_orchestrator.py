"""
Pipeline orchestrator - Ejecuta flujos de trabajo completos de Inpatient2Vec.
Combina los servicios (cohorte sintética, preentrenamiento, evaluación) en
pipelines predefinidos. Cada paso devuelve un dict con "status".
"""
import logging
from dataclasses import asdict
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple

from rich.console import Console

from config import RunConfig, evaluation_threads
from services.checkpoint import load_checkpoint, save_checkpoint, write_training_log
from services.corpus import (
    Cohort,
    FilterConfig,
    cohort_stats,
    diagnosis_families_from_codes,
    load_cohort,
    save_cohort,
    split_cohort,
)
from services.downstream import finetune_los, finetune_next_day, pretrained_head_report
from services.errors import InputError
from services.evaluation import (
    constant_los_report,
    diagnosis_vectors,
    evaluate_clustering,
    evaluate_intrusion,
    build_intrusion_sets,
    frequency_baseline,
    remaining_los_slots,
)
from services.reporting import EvalReport, save_report, write_intrusion_worksheet
from services.synthetic import (
    GroundTruth,
    generate_synthetic,
    ground_truth_path,
    load_ground_truth,
    save_ground_truth,
)
from services.training import pretrain

logger = logging.getLogger(__name__)

EVAL_TASKS = ("intrusion", "cluster", "recall", "los")


def training_log_path(checkpoint_path) -> Path:
    path = Path(checkpoint_path)
    return path.with_name(path.stem + ".log.csv")


class Inpatient2VecPipeline:
    """Orquestador de pipelines de Inpatient2Vec."""

    def __init__(self, run: RunConfig, console: Optional[Console] = None, threads: Optional[int] = None):
        self.run = run
        self.console = console or Console()
        self.threads = threads or evaluation_threads()

    def _banner(self, title: str, *lines: str) -> None:
        self.console.print("=" * 70)
        self.console.print(title)
        self.console.print("=" * 70)
        for line in lines:
            self.console.print(line)

    def synth_only(self, out_path) -> Dict:
        """
        Generar una cohorte sintética y su verdad de referencia.
        Útil para: pruebas automáticas sin datos reales
        """
        out_path = Path(out_path)
        truth_path = ground_truth_path(out_path)
        self._banner(
            "PASO 1: Cohorte sintética",
            f"Semilla:  {self.run.synth.seed}",
            f"Salida:   {out_path} (+ {truth_path.name})\n",
        )
        cohort, truth = generate_synthetic(self.run.synth)
        save_cohort(cohort, out_path)
        save_ground_truth(truth, truth_path)
        return {
            "status": "success",
            "cohort_path": str(out_path),
            "truth_path": str(truth_path),
            "stats": cohort_stats(cohort),
        }

    def load_splits(
        self,
        cohort_path,
        filter_config: Optional[FilterConfig] = None,
        ratios: Optional[Sequence[float]] = None,
        seed: Optional[int] = None,
    ) -> Tuple[Cohort, Cohort, Cohort, Cohort]:
        """Cargar, filtrar y dividir una cohorte (filtered, train, valid, test)."""
        filter_config = filter_config or self.run.filter
        cohort = filter_config.apply(load_cohort(cohort_path))
        if len(cohort) == 0:
            raise InputError(f"No visits of {cohort_path} survive the filter {filter_config}")
        ratios = tuple(ratios) if ratios is not None else self.run.split.ratios
        seed = self.run.seed if seed is None else seed
        train, valid, test = split_cohort(cohort, ratios, seed)
        return cohort, train, valid, test

    def pretrain_only(self, cohort_path, out_path) -> Dict:
        """
        Preentrenar el modelo (máscara + día siguiente) y guardar el checkpoint.
        Útil para: cohortes ya generadas o reales
        """
        out_path = Path(out_path)
        self._banner(
            "PASO 2: Preentrenamiento",
            f"Entrada:  {cohort_path}",
            f"Salida:   {out_path} (+ {training_log_path(out_path).name})",
            f"Preset:   {self.run.preset}, {self.run.train.epochs} épocas, semilla {self.run.train.seed}\n",
        )
        cohort, train, valid, _ = self.load_splits(cohort_path)
        metadata = {
            "preset": self.run.preset,
            "cohort": cohort.provenance.get("source"),
            "filter": asdict(self.run.filter),
            "split": {"ratios": list(self.run.split.ratios), "seed": self.run.seed},
        }
        checkpoint = pretrain(train, valid, self.run.model, self.run.train, metadata)
        save_checkpoint(checkpoint, out_path)
        log_path = write_training_log(checkpoint.log, training_log_path(out_path))
        return {
            "status": "success",
            "checkpoint_path": str(out_path),
            "log_path": str(log_path),
            "best_epoch": checkpoint.metadata["best_epoch"],
            "log": checkpoint.log,
        }

    def _checkpoint_splits(self, checkpoint, cohort_path):
        """Reaplicar el filtro y la división guardados en el checkpoint."""
        meta = checkpoint.metadata
        filter_config = FilterConfig(**meta["filter"]) if "filter" in meta else self.run.filter
        split = meta.get("split", {})
        _, train, valid, test = self.load_splits(cohort_path, filter_config, split.get("ratios"), split.get("seed"))
        checkpoint.check_vocabulary(train.vocabulary)
        return train, valid, test

    def finetune_only(self, checkpoint_path, cohort_path, task: str = "next", with_control: bool = True) -> Dict:
        """
        Ajuste fino para predicción del día siguiente ("next") o de la estancia restante ("los").
        """
        self._banner(
            f"PASO 3: Ajuste fino ({task})",
            f"Checkpoint: {checkpoint_path}",
            f"Cohorte:    {cohort_path}\n",
        )
        checkpoint = load_checkpoint(checkpoint_path)
        train, _, test = self._checkpoint_splits(checkpoint, cohort_path)
        run = finetune_next_day if task == "next" else finetune_los
        _, report = run(checkpoint, train, test, self.run.train, threads=self.threads)
        result = {"status": "success", "task": task, "report": report.to_dict()}
        if with_control:
            _, control = run(checkpoint, train, test, self.run.train, random_init=True, threads=self.threads)
            result["control"] = control.to_dict()
        if task == "next":
            result["baseline"] = frequency_baseline(train, test).to_dict()
        else:
            _, train_targets = remaining_los_slots(train)
            result["baseline"] = constant_los_report(test, float(train_targets.mean())).to_dict()
        return result

    def _ground_truth(self, cohort_path, truth_path) -> Optional[GroundTruth]:
        if truth_path:
            return load_ground_truth(truth_path)
        if cohort_path and ground_truth_path(cohort_path).is_file():
            return load_ground_truth(ground_truth_path(cohort_path))
        return None

    def evaluate_only(
        self,
        checkpoint_path,
        cohort_path=None,
        tasks: Sequence[str] = EVAL_TASKS,
        out_dir=None,
        truth_path=None,
        n_sets: int = 500,
        diag_mode: str = "day_mean",
        finetune: bool = True,
    ) -> Dict:
        """
        Evaluar un checkpoint: intrusión, clustering de diagnósticos, Recall@k y RMSE de estancia.
        Sin verdad de referencia se escriben hojas de anotación para la intrusión.
        """
        unknown = [t for t in tasks if t not in EVAL_TASKS]
        if unknown:
            raise InputError(f"Unknown evaluation task(s): {', '.join(unknown)}")
        if cohort_path is None and any(t in ("recall", "los") for t in tasks):
            raise InputError("Tasks 'recall' and 'los' need --cohort")
        out_dir = Path(out_dir) if out_dir else Path(checkpoint_path).parent
        self._banner(
            "EVALUACIÓN",
            f"Checkpoint: {checkpoint_path}",
            f"Tareas:     {', '.join(tasks)}",
            f"Salida:     {out_dir}\n",
        )
        checkpoint = load_checkpoint(checkpoint_path)
        vocab = checkpoint.vocabulary
        seed = self.run.seed
        truth = self._ground_truth(cohort_path, truth_path)
        if truth is not None and not truth.covers(vocab):
            logger.warning("Ground truth does not cover the checkpoint vocabulary; ignoring it")
            truth = None

        report = EvalReport(metadata={
            "checkpoint": str(checkpoint_path),
            "cohort": None if cohort_path is None else str(cohort_path),
            "vocab_digest": vocab.digest(),
            "seed": seed,
            "tasks": list(tasks),
            "best_epoch": checkpoint.metadata.get("best_epoch"),
        })
        files = {}
        activity_vectors = checkpoint.model.tables.activity.data[:vocab.n_activities]

        if "intrusion" in tasks:
            if truth is not None:
                result = evaluate_intrusion(activity_vectors, truth.activity_labels(vocab), n_sets, seed)
                report.intrusion = {
                    "precision": result.precision,
                    "control_precision": result.control_precision,
                    "n_sets": result.n_sets,
                }
            else:
                sets = build_intrusion_sets(activity_vectors, n_sets, seed)
                sheet, key = write_intrusion_worksheet(
                    sets, vocab.activity_codes,
                    out_dir / "intrusion_worksheet.csv", out_dir / "intrusion_answers.csv", seed,
                )
                files.update({"worksheet": str(sheet), "answer_key": str(key)})

        if "cluster" in tasks:
            labels = truth.diagnosis_labels(vocab) if truth is not None else diagnosis_families_from_codes(vocab)
            if len(set(labels.tolist())) < 2:
                logger.warning("Only one diagnosis family present; skipping clustering")
            else:
                result = evaluate_clustering(diagnosis_vectors(checkpoint, diag_mode), labels, seed=seed, mode=diag_mode)
                report.clustering = {
                    "mode": result.mode,
                    "k": result.k,
                    "nmi": result.nmi,
                    "control_nmi": result.control_nmi,
                    "labels": "ground_truth" if truth is not None else "code_prefix",
                }

        if "recall" in tasks or "los" in tasks:
            train, _, test = self._checkpoint_splits(checkpoint, cohort_path)
            config = self.run.train
            if "recall" in tasks:
                report.recall["Inpatient2Vec (pretrained head)"] = pretrained_head_report(checkpoint, test, self.threads).to_dict()
                if finetune:
                    report.recall["Inpatient2Vec + fine-tune"] = finetune_next_day(
                        checkpoint, train, test, config, threads=self.threads)[1].to_dict()
                    report.recall["Random init + fine-tune"] = finetune_next_day(
                        checkpoint, train, test, config, random_init=True, threads=self.threads)[1].to_dict()
                report.recall["Frequency baseline"] = frequency_baseline(train, test).to_dict()
            if "los" in tasks:
                if finetune:
                    report.los["Inpatient2Vec + fine-tune"] = finetune_los(
                        checkpoint, train, test, config, threads=self.threads)[1].to_dict()
                    report.los["Random init + fine-tune"] = finetune_los(
                        checkpoint, train, test, config, random_init=True, threads=self.threads)[1].to_dict()
                _, train_targets = remaining_los_slots(train)
                report.los["Constant mean"] = constant_los_report(test, float(train_targets.mean())).to_dict()

        json_path, text_path = save_report(report, out_dir)
        files.update({"json": str(json_path), "text": str(text_path)})
        return {"status": "success", "report": report, "files": files}

    def full_run(self, out_dir, tasks: Sequence[str] = EVAL_TASKS, n_sets: int = 500) -> Dict:
        """
        Ejecutar 3 pasos completos: Cohorte sintética + Preentrenamiento + Evaluación
        Útil para: comprobar el sistema de punta a punta y su determinismo
        """
        out_dir = Path(out_dir)
        self._banner("PIPELINE COMPLETO: Cohorte + Preentrenamiento + Evaluación")
        cohort_path = out_dir / "cohort.jsonl"
        checkpoint_path = out_dir / "model.i2v"

        self.console.print("\nPASO 1: Cohorte sintética")
        self.console.print("-" * 70)
        synth = self.synth_only(cohort_path)

        self.console.print("\nPASO 2: Preentrenamiento")
        self.console.print("-" * 70)
        trained = self.pretrain_only(cohort_path, checkpoint_path)

        self.console.print("\nPASO 3: Evaluación")
        self.console.print("-" * 70)
        evaluated = self.evaluate_only(checkpoint_path, cohort_path, tasks, out_dir, n_sets=n_sets)

        return {
            "status": "success",
            "step_1_synth": synth,
            "step_2_pretrain": trained,
            "step_3_eval": evaluated,
        }
