from django.contrib import admin
from django.core.management import call_command
from io import StringIO
import logging
from .models import EvaluationRecord, RunStatus, TrainingRun

logger = logging.getLogger(__name__)


class EvaluationRecordInline(admin.TabularInline):
    model = EvaluationRecord
    extra = 0
    fields = ['split', 'episodes', 'per_image_accuracy', 'pairwise_accuracy', 'created_at']
    readonly_fields = fields
    can_delete = False


@admin.register(TrainingRun)
class TrainingRunAdmin(admin.ModelAdmin):
    list_display = ['name', 'model_kind', 'seed', 'status', 'epochs_completed', 'best_val_pairwise', 'test_pairwise', 'created_at']
    list_filter = ['model_kind', 'status']
    search_fields = ['name', 'run_dir', 'dataset_path']
    readonly_fields = ['created_at', 'updated_at', 'code_version', 'best_checkpoint', 'test_pairwise']
    inlines = [EvaluationRecordInline]
    actions = ['evaluate_on_test_split']

    fieldsets = (
        ('Run', {
            'fields': ('name', 'model_kind', 'seed', 'status', 'error')
        }),
        ('Artifacts', {
            'fields': ('run_dir', 'best_checkpoint', 'dataset_path', 'code_version', 'config')
        }),
        ('Progress', {
            'fields': ('epochs_completed', 'best_val_pairwise', 'test_pairwise', 'final_report')
        }),
        ('Timestamps', {
            'fields': ('created_at', 'updated_at')
        }),
    )

    def evaluate_on_test_split(self, request, queryset):
        """Re-run eval for the best checkpoint of each selected run"""
        success_count = 0
        errors = []

        for run in queryset:
            if run.status != RunStatus.COMPLETED:
                errors.append(f"{run.name}: run is {run.get_status_display().lower()}")
                continue

            out = StringIO()
            err = StringIO()
            try:
                call_command(
                    'eval',
                    checkpoint=run.best_checkpoint,
                    data=run.dataset_path,
                    split='test',
                    stdout=out,
                    stderr=err,
                )
                success_count += 1
                logger.info(f"Re-evaluated run {run.name}")
            except Exception as e:
                errors.append(f"{run.name}: {e}")
                logger.exception(f"Exception evaluating run {run.name}: {e}")

        messages = []
        if success_count > 0:
            messages.append(f"Evaluated {success_count} run(s) on the test split.")
        if errors:
            messages.append(f"Failed to evaluate {len(errors)} run(s).")
            for error in errors:
                messages.append(f"  - {error}")

        self.message_user(request, "\n".join(messages) if messages else "No runs processed.")

    evaluate_on_test_split.short_description = "Evaluate selected runs on their test split"


@admin.register(EvaluationRecord)
class EvaluationRecordAdmin(admin.ModelAdmin):
    list_display = ['checkpoint_path', 'split', 'episodes', 'per_image_accuracy', 'pairwise_accuracy', 'run', 'created_at']
    list_filter = ['split']
    search_fields = ['checkpoint_path', 'data_path']
    readonly_fields = ['created_at']
