from django.core.validators import MinValueValidator
from django.db import models


class ConceptFamily(models.TextChoices):
    """Enum for the synthetic concept families"""
    COUNT_PARITY = 'count-parity', 'Even vs odd dot count'
    POSITION_RELATION = 'position-relation', 'Square strictly above ring'
    CONVEXITY = 'convexity', 'Convex vs concave polygon'


class DatasetSplit(models.TextChoices):
    """Enum for dataset splits"""
    TRAIN = 'train', 'Train'
    VAL = 'val', 'Validation'
    TEST = 'test', 'Test'


class ModelKind(models.TextChoices):
    """Enum for trainable model kinds"""
    SBSD = 'sbsd', 'Sinkhorn contrastive solver'
    PMOC_V1 = 'pmoc-v1', 'PMoC, Gaussian head'
    PMOC_V2 = 'pmoc-v2', 'PMoC, direct-probability head'
    PMOC_V2_STRAW = 'pmoc-v2-straw', 'PMoC, direct-probability head on a straw pose stack'


class RunStatus(models.TextChoices):
    """Enum for training run lifecycle"""
    RUNNING = 'running', 'Running'
    COMPLETED = 'completed', 'Completed'
    FAILED = 'failed', 'Failed'
    DIVERGED = 'diverged', 'Diverged'


class TrainingRun(models.Model):
    """One invocation of the train command and the run directory it produced"""

    name = models.CharField(max_length=255, db_index=True)
    model_kind = models.CharField(
        max_length=32,
        choices=ModelKind.choices,
        db_index=True,
        help_text="Model trained by this run"
    )
    seed = models.BigIntegerField()
    config = models.JSONField(help_text="Run configuration exactly as read from disk")
    run_dir = models.CharField(max_length=500)
    dataset_path = models.CharField(max_length=500)
    code_version = models.CharField(max_length=64, blank=True)

    status = models.CharField(max_length=16, choices=RunStatus.choices, default=RunStatus.RUNNING)
    epochs_completed = models.PositiveIntegerField(default=0)
    best_val_pairwise = models.FloatField(blank=True, null=True)
    final_report = models.JSONField(blank=True, null=True)
    error = models.TextField(blank=True, null=True)

    # Timestamps
    created_at = models.DateTimeField(auto_now_add=True)
    updated_at = models.DateTimeField(auto_now=True)

    class Meta:
        ordering = ['-created_at']
        verbose_name = 'Training Run'
        verbose_name_plural = 'Training Runs'

    def __str__(self):
        return f"{self.name} - {self.get_model_kind_display()} - {self.get_status_display()}"

    @property
    def best_checkpoint(self):
        return f"{self.run_dir}/checkpoints/best.ckpt"

    @property
    def test_pairwise(self):
        """Pairwise test accuracy from the final report, if the run finished"""
        if self.final_report:
            return self.final_report.get('pairwise')
        return None


class EvaluationRecord(models.Model):
    """Accuracy report produced by the eval command"""

    run = models.ForeignKey(
        TrainingRun,
        on_delete=models.SET_NULL,
        blank=True,
        null=True,
        related_name='evaluations'
    )
    checkpoint_path = models.CharField(max_length=500)
    data_path = models.CharField(max_length=500)
    split = models.CharField(max_length=8, choices=DatasetSplit.choices, blank=True)
    episodes = models.PositiveIntegerField(validators=[MinValueValidator(0)])
    per_image_accuracy = models.FloatField()
    pairwise_accuracy = models.FloatField()
    per_family = models.JSONField(default=dict)

    created_at = models.DateTimeField(auto_now_add=True)

    class Meta:
        ordering = ['-created_at']
        verbose_name = 'Evaluation Record'
        verbose_name_plural = 'Evaluation Records'

    def __str__(self):
        split = self.split or 'all'
        return f"{self.checkpoint_path} on {split} - pairwise {self.pairwise_accuracy:.3f}"
